//! Reproducible synthetic scenarios with planted ground truth.
//!
//! Each tensor role draws from its own ChaCha8 stream keyed by `rng_seed`, so
//! a scenario is a pure function of its [`ScenarioSpec`].

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{FrameFeatureSet, QueryEmbedding};
use crate::linalg::{cosine, Matrix};
use crate::pipeline::SelectionManifest;
use crate::scenario::{GroundTruth, Scenario, ScenarioError};
use crate::token::{AttentionTensor, KeyStates};

/// Key cosine at or above which two tokens count as redundant.
pub const REDUNDANT_COSINE: f64 = 0.95;

// Distractor logits are clipped to [-CLIP, CLIP] and cluster members get
// CLUSTER_BOOST on top; planted logits start above both.
const DISTRACTOR_CLIP: f64 = 3.0;
const CLUSTER_BOOST: f64 = 1.5;
const PLANTED_LOGIT: f64 = 5.0;
// Members sit within this angle of their centroid, so any two members are
// within twice the angle (cos 16° ≈ 0.961).
const CLUSTER_HALF_ANGLE_DEG: f64 = 8.0;
const FRAME_NOISE: f32 = 0.05;
const FRAME_STRIDE_MS: i64 = 40;

const STREAM_QUERY: u64 = 1;
const STREAM_EMBEDDINGS: u64 = 2;
const STREAM_PIXELS: u64 = 3;
const STREAM_ATTENTION: u64 = 4;
const STREAM_KEYS: u64 = 5;
const STREAM_CLUSTERS: u64 = 6;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("infeasible scenario spec: {0}")]
    Infeasible(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

#[derive(Debug, Error)]
pub enum EvaluationError {
    #[error("scenario has no ground truth")]
    NoGroundTruth,
    #[error("manifest does not match scenario: {0}")]
    ScenarioMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub rng_seed: u64,
    pub n_frames: usize,
    pub tokens_per_frame: usize,
    pub embed_dim: usize,
    pub pixel_dim: usize,
    pub key_dim: usize,
    pub heads: usize,
    pub query_tokens: usize,
    #[serde(default)]
    pub planted_frames: Vec<usize>,
    /// Local token indices per planted frame; empty means none anywhere.
    #[serde(default)]
    pub planted_tokens: Vec<Vec<usize>>,
    /// Cosine gap between the least relevant planted frame and the most
    /// relevant distractor.
    #[serde(default)]
    pub relevance_margin: f32,
    /// Near-duplicate key clusters per frame.
    #[serde(default)]
    pub cluster_redundancy: usize,
}

impl ScenarioSpec {
    /// 16 frames with planted frames 3 and 10 (different buckets for K = 4),
    /// three planted tokens each, no key clusters.
    pub fn standard_planted(rng_seed: u64) -> Self {
        Self {
            rng_seed,
            n_frames: 16,
            tokens_per_frame: 64,
            embed_dim: 32,
            pixel_dim: 192,
            key_dim: 16,
            heads: 4,
            query_tokens: 8,
            planted_frames: vec![3, 10],
            planted_tokens: vec![vec![5, 17, 42], vec![0, 33, 63]],
            relevance_margin: 0.5,
            cluster_redundancy: 0,
        }
    }

    /// The planted layout without planted tokens, plus four key clusters per frame.
    pub fn standard_clustered(rng_seed: u64) -> Self {
        Self {
            planted_tokens: Vec::new(),
            cluster_redundancy: 4,
            ..Self::standard_planted(rng_seed)
        }
    }

    /// Members per cluster: half of each frame's tokens are clustered.
    pub fn cluster_size(&self) -> usize {
        if self.cluster_redundancy == 0 {
            0
        } else {
            (self.tokens_per_frame / (2 * self.cluster_redundancy)).max(2)
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Infeasible(m));
        for (name, v) in [
            ("n_frames", self.n_frames),
            ("tokens_per_frame", self.tokens_per_frame),
            ("pixel_dim", self.pixel_dim),
            ("key_dim", self.key_dim),
            ("heads", self.heads),
            ("query_tokens", self.query_tokens),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.embed_dim < 2 {
            return bad("embed_dim must be at least 2".into());
        }
        if !(0.0..=2.0).contains(&self.relevance_margin) {
            return bad(format!("relevance_margin {} outside [0, 2]", self.relevance_margin));
        }
        let distinct: BTreeSet<_> = self.planted_frames.iter().collect();
        if distinct.len() != self.planted_frames.len() {
            return bad("planted_frames contains duplicates".into());
        }
        if let Some(&f) = self.planted_frames.iter().find(|&&f| f >= self.n_frames) {
            return bad(format!("planted frame {f} out of range for {} frames", self.n_frames));
        }
        if !self.planted_tokens.is_empty() && self.planted_tokens.len() != self.planted_frames.len() {
            return bad(format!(
                "{} planted token lists for {} planted frames",
                self.planted_tokens.len(),
                self.planted_frames.len()
            ));
        }
        for tokens in &self.planted_tokens {
            if tokens.len() > self.tokens_per_frame {
                return bad(format!(
                    "{} planted tokens exceed {} tokens per frame",
                    tokens.len(),
                    self.tokens_per_frame
                ));
            }
            if let Some(&t) = tokens.iter().find(|&&t| t >= self.tokens_per_frame) {
                return bad(format!("planted token {t} out of range"));
            }
            if tokens.iter().collect::<BTreeSet<_>>().len() != tokens.len() {
                return bad("planted token list contains duplicates".into());
            }
        }
        if self.cluster_redundancy > 0 {
            if self.key_dim < 2 {
                return bad("key clusters need key_dim >= 2".into());
            }
            if self.cluster_redundancy * self.cluster_size() > self.tokens_per_frame {
                return bad(format!(
                    "{} clusters do not fit in {} tokens per frame",
                    self.cluster_redundancy, self.tokens_per_frame
                ));
            }
        }
        let total = self
            .n_frames
            .checked_mul(self.tokens_per_frame)
            .and_then(|v| v.checked_mul(self.heads * self.query_tokens));
        if total.is_none() {
            return bad("tensor sizes overflow".into());
        }
        Ok(())
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn dot64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) {
    let n = dot64(v, v).sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

/// Random unit vector orthogonal to the unit vector `axis`.
fn orthogonal_unit(rng: &mut ChaCha8Rng, axis: &[f64]) -> Vec<f64> {
    loop {
        let mut u = gaussian(rng, axis.len());
        let p = dot64(&u, axis);
        u.iter_mut().zip(axis).for_each(|(x, a)| *x -= p * a);
        if dot64(&u, &u) > 1e-12 {
            normalize(&mut u);
            return u;
        }
    }
}

/// Cosine range for distractor frames and the lower end for planted ones.
fn relevance_bands(margin: f64) -> ((f64, f64), f64) {
    let d_hi = 0.25f64.min(1.0 - margin);
    let d_lo = (d_hi - 0.5).max(-1.0);
    ((d_lo, d_hi), (d_hi + margin).min(1.0))
}

pub fn generate(spec: &ScenarioSpec) -> Result<Scenario, SynthError> {
    spec.validate()?;
    let n = spec.n_frames;
    let t = spec.tokens_per_frame;
    let nv = n * t;
    let planted: BTreeSet<usize> = spec.planted_frames.iter().copied().collect();

    let mut rng = stream(spec.rng_seed, STREAM_QUERY);
    let mut query = gaussian(&mut rng, spec.embed_dim);
    normalize(&mut query);

    // Embedding = c·q + sqrt(1 - c²)·u with u ⊥ q, so cos(e, q) = c exactly.
    let ((d_lo, d_hi), p_lo) = relevance_bands(spec.relevance_margin as f64);
    let mut rng = stream(spec.rng_seed, STREAM_EMBEDDINGS);
    let mut embeddings = Vec::with_capacity(n * spec.embed_dim);
    for f in 0..n {
        let u = orthogonal_unit(&mut rng, &query);
        let r: f64 = rng.random();
        let c = if planted.contains(&f) {
            p_lo + r * (1.0 - p_lo)
        } else {
            d_lo + r * (d_hi - d_lo)
        };
        let scale = 0.5 + rng.random::<f64>();
        let s = (1.0 - c * c).max(0.0).sqrt();
        embeddings.extend(query.iter().zip(&u).map(|(q, u)| ((c * q + s * u) * scale) as f32));
    }

    // Scenes of 2..=6 frames around a shared base vector.
    let mut rng = stream(spec.rng_seed, STREAM_PIXELS);
    let mut pixels = Vec::with_capacity(n * spec.pixel_dim);
    let mut base = Vec::new();
    let mut scene_left = 0usize;
    for _ in 0..n {
        if scene_left == 0 {
            base = gaussian(&mut rng, spec.pixel_dim);
            scene_left = rng.random_range(2..=6);
        }
        scene_left -= 1;
        for b in &base {
            let noise: f64 = rng.sample(StandardNormal);
            pixels.push(*b as f32 + FRAME_NOISE * noise as f32);
        }
    }

    // Cluster membership: a random half of each frame's tokens.
    let size = spec.cluster_size();
    let mut rng = stream(spec.rng_seed, STREAM_CLUSTERS);
    let mut member_of: Vec<Option<usize>> = vec![None; nv];
    let mut clusters = Vec::new();
    for f in 0..n {
        let mut order: Vec<usize> = (0..t).collect();
        order.shuffle(&mut rng);
        for c in 0..spec.cluster_redundancy {
            let mut members: Vec<usize> = order[c * size..(c + 1) * size].iter().map(|&l| f * t + l).collect();
            members.sort_unstable();
            for &g in &members {
                member_of[g] = Some(clusters.len());
            }
            clusters.push(members);
        }
    }

    let mut rng = stream(spec.rng_seed, STREAM_KEYS);
    let centroids: Vec<Vec<f64>> = (0..clusters.len())
        .map(|_| {
            let mut c = gaussian(&mut rng, spec.key_dim);
            normalize(&mut c);
            c
        })
        .collect();
    let max_angle = CLUSTER_HALF_ANGLE_DEG.to_radians();
    let mut keys = Vec::with_capacity(nv * spec.key_dim);
    for cluster in &member_of {
        let scale = 0.5 + rng.random::<f64>();
        match cluster {
            Some(c) => {
                let centroid = &centroids[*c];
                let w = orthogonal_unit(&mut rng, centroid);
                let theta = rng.random::<f64>() * max_angle;
                let (s, co) = theta.sin_cos();
                keys.extend(centroid.iter().zip(&w).map(|(c, w)| ((co * c + s * w) * scale) as f32));
            }
            None => keys.extend(gaussian(&mut rng, spec.key_dim).into_iter().map(|x| (x * scale) as f32)),
        }
    }

    let mut planted_tokens = Vec::new();
    for (f, locals) in spec.planted_frames.iter().zip(&spec.planted_tokens) {
        planted_tokens.extend(locals.iter().map(|&l| f * t + l));
    }
    planted_tokens.sort_unstable();
    let mut is_planted = vec![false; nv];
    for &g in &planted_tokens {
        is_planted[g] = true;
    }

    // Softmax rows over all candidate tokens. Every planted logit exceeds every
    // distractor logit in every row, so planted tokens top the mean attention.
    let mut rng = stream(spec.rng_seed, STREAM_ATTENTION);
    let rows = spec.heads * spec.query_tokens;
    let mut attention = Vec::with_capacity(rows * nv);
    let mut logits = vec![0.0f64; nv];
    for _ in 0..rows {
        for (j, l) in logits.iter_mut().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            let u: f64 = rng.random();
            *l = if is_planted[j] {
                PLANTED_LOGIT + u
            } else {
                z.clamp(-DISTRACTOR_CLIP, DISTRACTOR_CLIP) + if member_of[j].is_some() { CLUSTER_BOOST } else { 0.0 }
            };
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        attention.extend(logits.iter().map(|l| ((l - max).exp() / total) as f32));
    }

    let matrix = |rows, cols, data| Matrix::new(rows, cols, data).expect("sizes computed from spec");
    let frames = FrameFeatureSet::new(
        matrix(n, spec.pixel_dim, pixels),
        matrix(n, spec.embed_dim, embeddings),
        (0..n as i64).map(|i| i * FRAME_STRIDE_MS).collect(),
    )
    .map_err(ScenarioError::from)?;
    let query = QueryEmbedding::new(query.into_iter().map(|x| x as f32).collect()).map_err(ScenarioError::from)?;
    let attention = AttentionTensor::new(spec.heads, spec.query_tokens, nv, attention).map_err(ScenarioError::from)?;
    let keys = KeyStates::new(matrix(nv, spec.key_dim, keys)).map_err(ScenarioError::from)?;

    let mut scenario = Scenario::new(frames, query, attention, keys, t)?;
    scenario.spec = Some(spec.clone());
    scenario.ground_truth = Some(GroundTruth {
        planted_frames: planted.into_iter().collect(),
        planted_tokens,
        clusters,
    });
    Ok(scenario)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SelectionMetrics {
    pub frame_recall: f64,
    pub token_recall: f64,
    pub core_token_recall: f64,
    /// Fraction of same-frame selected token pairs with key cosine ≥ 0.95.
    pub redundancy_rate: f64,
}

/// `|hit ∩ planted| / |planted|`; 1 when nothing was planted.
fn recall(selected: &[usize], planted: &[usize]) -> f64 {
    if planted.is_empty() {
        return 1.0;
    }
    let selected: BTreeSet<_> = selected.iter().collect();
    planted.iter().filter(|p| selected.contains(p)).count() as f64 / planted.len() as f64
}

pub fn evaluate_selection(
    manifest: &SelectionManifest,
    scenario: &Scenario,
) -> Result<SelectionMetrics, EvaluationError> {
    let truth = scenario.ground_truth.as_ref().ok_or(EvaluationError::NoGroundTruth)?;
    let t = scenario.tokens_per_frame;
    if manifest.scenario.candidate_frames != scenario.candidate_frames() || manifest.scenario.tokens_per_frame != t {
        return Err(EvaluationError::ScenarioMismatch(format!(
            "manifest describes {} frames x {} tokens, scenario has {} x {t}",
            manifest.scenario.candidate_frames,
            manifest.scenario.tokens_per_frame,
            scenario.candidate_frames()
        )));
    }
    let tokens = &manifest.tokens;
    if let Some(&g) = tokens.final_tokens.iter().find(|&&g| g >= scenario.candidate_tokens()) {
        return Err(EvaluationError::ScenarioMismatch(format!("token {g} out of range")));
    }

    let mut pairs = 0u64;
    let mut redundant = 0u64;
    let mut start = 0;
    while start < tokens.final_tokens.len() {
        let frame = tokens.final_tokens[start] / t;
        let end = start
            + tokens.final_tokens[start..]
                .iter()
                .take_while(|&&g| g / t == frame)
                .count();
        let group = &tokens.final_tokens[start..end];
        for (i, &a) in group.iter().enumerate() {
            for &b in &group[i + 1..] {
                pairs += 1;
                if cosine(scenario.keys.row(a), scenario.keys.row(b)) >= REDUNDANT_COSINE {
                    redundant += 1;
                }
            }
        }
        start = end;
    }

    Ok(SelectionMetrics {
        frame_recall: recall(&manifest.keyframes.frame_indices, &truth.planted_frames),
        token_recall: recall(&tokens.final_tokens, &truth.planted_tokens),
        core_token_recall: recall(&tokens.core, &truth.planted_tokens),
        redundancy_rate: if pairs == 0 {
            0.0
        } else {
            redundant as f64 / pairs as f64
        },
    })
}
