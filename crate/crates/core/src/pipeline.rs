//! End-to-end run: frame budgeting, restriction to keyframe tokens, token
//! budgeting, and the JSON selection manifest with its cost report.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::{write_bundle_file, TensorBundle};
use crate::frame::{
    bucket_allocate, frame_importance, select_keyframes, BucketPlan, FrameBudgetError, FrameScoreTable,
    KeyframeSelection, ScoreWeights,
};
use crate::json::{to_canonical_string, write_atomic};
use crate::scenario::{Scenario, ScenarioError};
use crate::token::{
    run_token_budgeting, token_importance, BudgetConfig, TokenBudget, TokenBudgetError, TokenScoreTable, TokenSelection,
};

pub const MANIFEST_FORMAT: &str = "triage-manifest/1";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("input error: {0}")]
    Input(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("internal inconsistency: {0}")]
    Internal(String),
}

impl PipelineError {
    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Input(_) => 2,
            PipelineError::Config(_) => 3,
            PipelineError::Internal(_) => 4,
        }
    }
}

impl From<ScenarioError> for PipelineError {
    fn from(e: ScenarioError) -> Self {
        PipelineError::Input(e.to_string())
    }
}

impl From<FrameBudgetError> for PipelineError {
    fn from(e: FrameBudgetError) -> Self {
        match e {
            FrameBudgetError::InvalidWeights(_) | FrameBudgetError::InvalidBudget(_) => {
                PipelineError::Config(e.to_string())
            }
            _ => PipelineError::Input(e.to_string()),
        }
    }
}

impl From<TokenBudgetError> for PipelineError {
    fn from(e: TokenBudgetError) -> Self {
        match e {
            TokenBudgetError::InvalidConfig(_) => PipelineError::Config(e.to_string()),
            TokenBudgetError::Inconsistent(_) => PipelineError::Internal(e.to_string()),
            _ => PipelineError::Input(e.to_string()),
        }
    }
}

/// KV-cache cost model constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostProfile {
    pub layers: u64,
    pub kv_heads: u64,
    pub head_dim: u64,
    pub bytes_per_element: u64,
}

impl Default for CostProfile {
    fn default() -> Self {
        Self {
            layers: 28,
            kv_heads: 4,
            head_dim: 128,
            bytes_per_element: 2,
        }
    }
}

impl CostProfile {
    /// Keys and values for `tokens` tokens across every layer.
    pub fn kv_bytes(&self, tokens: u64) -> u64 {
        2 * self.layers * self.kv_heads * self.head_dim * self.bytes_per_element * tokens
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KeyframeBudget {
    Frames(usize),
    /// Fraction of candidate frames; at least one frame is kept.
    Ratio(f64),
}

impl KeyframeBudget {
    pub fn resolve(self, candidates: usize) -> usize {
        match self {
            KeyframeBudget::Frames(m) => m,
            KeyframeBudget::Ratio(r) => ((r * candidates as f64).round() as usize).max(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub keyframes: KeyframeBudget,
    pub buckets: usize,
    pub weights: ScoreWeights,
    /// Token budget over the keyframes' tokens (`M·T`).
    pub tokens: TokenBudget,
    pub core_ratio: f64,
    pub seeds_per_frame: usize,
    pub lambda: f32,
    pub cost: CostProfile,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            keyframes: KeyframeBudget::Frames(8),
            buckets: 8,
            weights: ScoreWeights::default(),
            tokens: TokenBudget::Ratio(0.5),
            core_ratio: BudgetConfig::DEFAULT_CORE_RATIO,
            seeds_per_frame: BudgetConfig::DEFAULT_SEEDS,
            lambda: BudgetConfig::DEFAULT_LAMBDA,
            cost: CostProfile::default(),
        }
    }
}

impl PipelineConfig {
    pub fn budget_config(&self) -> Result<BudgetConfig, PipelineError> {
        Ok(BudgetConfig::new(
            self.tokens,
            self.core_ratio,
            self.seeds_per_frame,
            self.lambda,
        )?)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if let KeyframeBudget::Ratio(r) = self.keyframes {
            if !(r > 0.0 && r <= 1.0) {
                return Err(PipelineError::Config(format!("frame retention {r} outside (0, 1]")));
            }
        }
        if self.buckets == 0 {
            return Err(PipelineError::Config("bucket count must be positive".into()));
        }
        self.budget_config().map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub candidate_frames: usize,
    pub tokens_per_frame: usize,
    pub candidate_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub keyframe_budget: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_retention: Option<f64>,
    pub buckets: usize,
    /// `[w_c, w_m, w_r]`.
    pub weights: [f32; 3],
    pub token_budget: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retention: Option<f64>,
    pub core_ratio: f64,
    pub seeds_per_frame: usize,
    pub lambda: f32,
    pub cost_profile: CostProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyframeReport {
    pub frame_indices: Vec<usize>,
    pub frame_scores: Vec<f32>,
    pub bucket_bounds: Vec<usize>,
    pub bucket_allocations: Vec<usize>,
    pub bucket_clamped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameTokenReport {
    pub frame_index: usize,
    pub context_budget: usize,
    pub seeds: Vec<usize>,
    pub context: Vec<usize>,
}

/// Token picks as global candidate-token indices (`frame * T + local`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenReport {
    pub token_budget: usize,
    pub core_budget: usize,
    pub core: Vec<usize>,
    pub frames: Vec<FrameTokenReport>,
    #[serde(rename = "final")]
    pub final_tokens: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub tokens_before: u64,
    pub tokens_after: u64,
    pub reduction_ratio: f32,
    pub kv_bytes_before: u64,
    pub kv_bytes_after: u64,
    pub attention_flops_proxy_before: u64,
    pub attention_flops_proxy_after: u64,
}

impl CostReport {
    pub fn new(before: u64, after: u64, profile: &CostProfile) -> Self {
        Self {
            tokens_before: before,
            tokens_after: after,
            reduction_ratio: if before == 0 {
                0.0
            } else {
                (1.0 - after as f64 / before as f64) as f32
            },
            kv_bytes_before: profile.kv_bytes(before),
            kv_bytes_after: profile.kv_bytes(after),
            attention_flops_proxy_before: before * before,
            attention_flops_proxy_after: after * after,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionManifest {
    pub format: String,
    pub scenario: ScenarioSummary,
    pub config: ConfigEcho,
    pub keyframes: KeyframeReport,
    pub tokens: TokenReport,
    pub cost: CostReport,
}

impl SelectionManifest {
    /// Checks that every token lies in a selected keyframe, per-frame picks lie
    /// in their own frame, and the final list is the disjoint sorted union.
    pub fn check_consistency(&self) -> Result<(), String> {
        let t = self.scenario.tokens_per_frame;
        let frames = &self.keyframes.frame_indices;
        if frames.windows(2).any(|w| w[0] >= w[1]) {
            return Err("keyframes not strictly ascending".into());
        }
        let in_keyframe = |g: &usize| frames.binary_search(&(g / t)).is_ok();
        if let Some(g) = self.tokens.core.iter().find(|g| !in_keyframe(g)) {
            return Err(format!("core token {g} outside the keyframes"));
        }
        let mut union = self.tokens.core.clone();
        for f in &self.tokens.frames {
            if let Some(g) = f.seeds.iter().chain(&f.context).find(|&&g| g / t != f.frame_index) {
                return Err(format!("token {g} listed under frame {}", f.frame_index));
            }
            union.extend(f.seeds.iter().chain(&f.context));
        }
        union.sort_unstable();
        if union.windows(2).any(|w| w[0] == w[1]) {
            return Err("token selected twice".into());
        }
        if union != self.tokens.final_tokens {
            return Err("final tokens are not the union of core, seeds and context".into());
        }
        if self.cost.tokens_after != union.len() as u64 {
            return Err("cost report disagrees with the selection".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        to_canonical_string(self).expect("manifest serializes")
    }

    pub fn write(&self, path: &Path) -> Result<(), PipelineError> {
        write_atomic(path, self.to_json().as_bytes())
            .map_err(|e| PipelineError::Input(format!("cannot write {}: {e}", path.display())))
    }
}

/// Intermediate results kept for inspection and dumping.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub frame_scores: FrameScoreTable,
    pub plan: BucketPlan,
    pub keyframes: KeyframeSelection,
    /// Importance of the keyframes' tokens, in keyframe-local order.
    pub token_scores: TokenScoreTable,
    /// Selection in keyframe-local token indices.
    pub selection: TokenSelection,
    pub manifest: SelectionManifest,
}

fn keyframe_ranges(keyframes: &KeyframeSelection, t: usize) -> Vec<Range<usize>> {
    keyframes.frame_indices.iter().map(|&f| f * t..(f + 1) * t).collect()
}

pub fn run_pipeline(scenario: &Scenario, config: &PipelineConfig) -> Result<PipelineOutcome, PipelineError> {
    config.validate()?;
    let budget = config.budget_config()?;
    let n = scenario.candidate_frames();
    let t = scenario.tokens_per_frame;

    let frame_scores = frame_importance(&scenario.frames, &scenario.query, &config.weights)?;
    let plan = bucket_allocate(&frame_scores, config.buckets, config.keyframes.resolve(n))?;
    let keyframes = select_keyframes(&frame_scores, &plan);

    let ranges = keyframe_ranges(&keyframes, t);
    let attention = scenario.attention.restrict_columns(&ranges)?;
    let keys = scenario.keys.gather(ranges.iter().flat_map(Clone::clone));
    let selection = run_token_budgeting(&attention, &keys, &keyframes, &budget)?;
    let token_scores = token_importance(&attention);

    let to_global = |l: usize| keyframes.frame_indices[l / t] * t + l % t;
    let globals = |v: &[usize]| v.iter().map(|&l| to_global(l)).collect::<Vec<_>>();
    let local_tokens = attention.visual_tokens();
    let token_budget = budget.total.resolve(local_tokens);

    let manifest = SelectionManifest {
        format: MANIFEST_FORMAT.into(),
        scenario: ScenarioSummary {
            candidate_frames: n,
            tokens_per_frame: t,
            candidate_tokens: scenario.candidate_tokens(),
        },
        config: ConfigEcho {
            keyframe_budget: keyframes.len(),
            frame_retention: match config.keyframes {
                KeyframeBudget::Ratio(r) => Some(r),
                KeyframeBudget::Frames(_) => None,
            },
            buckets: config.buckets,
            weights: [
                config.weights.change(),
                config.weights.motion(),
                config.weights.relevance(),
            ],
            token_budget,
            retention: match config.tokens {
                TokenBudget::Ratio(r) => Some(r),
                TokenBudget::Tokens(_) => None,
            },
            core_ratio: config.core_ratio,
            seeds_per_frame: config.seeds_per_frame,
            lambda: config.lambda,
            cost_profile: config.cost,
        },
        keyframes: KeyframeReport {
            frame_indices: keyframes.frame_indices.clone(),
            frame_scores: keyframes.frame_scores.clone(),
            bucket_bounds: plan.bucket_bounds.clone(),
            bucket_allocations: plan.allocations.clone(),
            bucket_clamped: plan.clamped,
        },
        tokens: TokenReport {
            token_budget,
            core_budget: budget.core_budget(token_budget),
            core: globals(&selection.core),
            frames: keyframes
                .frame_indices
                .iter()
                .zip(&selection.per_frame)
                .map(|(&frame_index, f)| FrameTokenReport {
                    frame_index,
                    context_budget: f.budget,
                    seeds: globals(&f.seeds),
                    context: globals(&f.context),
                })
                .collect(),
            final_tokens: globals(&selection.final_tokens),
        },
        cost: CostReport::new(
            scenario.candidate_tokens() as u64,
            selection.final_tokens.len() as u64,
            &config.cost,
        ),
    };
    manifest.check_consistency().map_err(PipelineError::Internal)?;

    Ok(PipelineOutcome {
        frame_scores,
        plan,
        keyframes,
        token_scores,
        selection,
        manifest,
    })
}

/// `manifest.json` → `manifest.intermediates` beside it.
pub fn intermediates_dir(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("intermediates")
}

/// Writes intermediate tensors and a `tokens.json` membership sidecar into
/// `dir`, replacing any previous contents. Files are staged in a temporary
/// directory and moved into place only once all of them are written.
pub fn dump_intermediates(outcome: &PipelineOutcome, dir: &Path) -> Result<(), PipelineError> {
    let io = |e: std::io::Error| PipelineError::Input(format!("cannot write {}: {e}", dir.display()));
    let parent = match dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let staging = tempfile::Builder::new()
        .prefix(".triage-dump")
        .tempdir_in(parent)
        .map_err(io)?;

    let table = &outcome.frame_scores;
    let n = table.len();
    let mut frame_rows = Vec::with_capacity(4 * n);
    for column in [&table.s_change, &table.s_motion, &table.s_relevance, &table.s_frame] {
        frame_rows.extend_from_slice(column);
    }
    let as_i64 = |v: &[usize]| v.iter().map(|&x| x as i64).collect::<Vec<_>>();
    let tokens = &outcome.manifest.tokens;
    let bundles = [
        TensorBundle::from_f32("frame_scores", vec![4, n], frame_rows),
        TensorBundle::from_i64(
            "keyframes",
            vec![outcome.keyframes.len()],
            as_i64(&outcome.keyframes.frame_indices),
        ),
        TensorBundle::from_f32(
            "keyframe_scores",
            vec![outcome.keyframes.len()],
            outcome.keyframes.frame_scores.clone(),
        ),
        TensorBundle::from_i64(
            "bucket_allocations",
            vec![outcome.plan.allocations.len()],
            as_i64(&outcome.plan.allocations),
        ),
        TensorBundle::from_f32(
            "token_importance",
            vec![outcome.token_scores.len()],
            outcome.token_scores.s_token.clone(),
        ),
        TensorBundle::from_i64(
            "tokens_final",
            vec![tokens.final_tokens.len()],
            as_i64(&tokens.final_tokens),
        ),
    ];
    for bundle in bundles {
        let bundle = bundle.map_err(|e| PipelineError::Internal(e.to_string()))?;
        let path = staging.path().join(format!("{}.trgb", bundle.name()));
        write_bundle_file(&bundle, &path).map_err(|e| PipelineError::Input(e.to_string()))?;
    }
    let sidecar = to_canonical_string(tokens).map_err(|e| PipelineError::Internal(e.to_string()))?;
    fs::write(staging.path().join("tokens.json"), sidecar).map_err(io)?;

    if dir.exists() {
        fs::remove_dir_all(dir).map_err(io)?;
    }
    let staged = staging.keep();
    fs::rename(&staged, dir).map_err(|e| {
        let _ = fs::remove_dir_all(&staged);
        io(e)
    })
}
