//! Token-level budgeting over the visual tokens of the selected keyframes.
//!
//! Tokens are laid out frame-major: keyframe `f` owns the contiguous range
//! `f*T..(f+1)*T`. The total budget `B_T` is spent in two phases:
//!
//! 1. **Core** tokens: the global top `B_core` tokens by importance, where
//!    importance is the attention a token receives averaged over every head
//!    and query token.
//! 2. **Context** tokens: the rest of the budget is split across keyframes in
//!    proportion to their frame scores. Inside each frame a few high-importance
//!    seeds are taken first, then the remaining slots go to the candidates
//!    with the best `importance - λ·max_seed cos(key_i, key_seed)`. The penalty
//!    is computed once against the seeds only, so the whole frame is scored in
//!    one batch.

use rayon::prelude::*;
use thiserror::Error;

use crate::apportion::apportion;
use crate::frame::KeyframeSelection;
use crate::linalg::{cosine_from_parts, dot, squared_norm, Matrix};
use crate::select::{top_k, top_k_of};

#[derive(Debug, Error, PartialEq)]
pub enum TokenBudgetError {
    #[error("empty attention tensor (shape [{0}, {1}, {2}])")]
    EmptyAttention(usize, usize, usize),
    #[error("attention weights must be finite and non-negative")]
    InvalidAttention,
    #[error("key states must be finite")]
    NonFiniteKeys,
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("invalid budget configuration: {0}")]
    InvalidConfig(String),
    #[error("internal inconsistency: {0}")]
    Inconsistent(String),
}

/// Cross-attention weights `[H, N_q, N_v]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensor {
    heads: usize,
    query_tokens: usize,
    visual_tokens: usize,
    data: Vec<f32>,
}

impl AttentionTensor {
    pub fn new(
        heads: usize,
        query_tokens: usize,
        visual_tokens: usize,
        data: Vec<f32>,
    ) -> Result<Self, TokenBudgetError> {
        if heads == 0 || query_tokens == 0 || visual_tokens == 0 {
            return Err(TokenBudgetError::EmptyAttention(heads, query_tokens, visual_tokens));
        }
        let expected = heads * query_tokens * visual_tokens;
        if data.len() != expected {
            return Err(TokenBudgetError::DimensionMismatch {
                what: "attention elements",
                expected,
                found: data.len(),
            });
        }
        if data.iter().any(|&a| !a.is_finite() || a < 0.0) {
            return Err(TokenBudgetError::InvalidAttention);
        }
        Ok(Self {
            heads,
            query_tokens,
            visual_tokens,
            data,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn query_tokens(&self) -> usize {
        self.query_tokens
    }

    pub fn visual_tokens(&self) -> usize {
        self.visual_tokens
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Weight from query token `i` to visual token `j` under head `h`.
    pub fn get(&self, h: usize, i: usize, j: usize) -> f32 {
        self.data[(h * self.query_tokens + i) * self.visual_tokens + j]
    }

    /// Rows in head-major, then query-token order; each row spans all visual tokens.
    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.visual_tokens)
    }

    /// Keeps only the visual-token columns in `ranges`, concatenated in order.
    pub fn restrict_columns(&self, ranges: &[std::ops::Range<usize>]) -> Result<Self, TokenBudgetError> {
        let width: usize = ranges.iter().map(|r| r.len()).sum();
        if ranges.iter().any(|r| r.end > self.visual_tokens) {
            return Err(TokenBudgetError::DimensionMismatch {
                what: "attention column range",
                expected: self.visual_tokens,
                found: ranges.iter().map(|r| r.end).max().unwrap_or(0),
            });
        }
        let mut data = Vec::with_capacity(self.heads * self.query_tokens * width);
        for row in self.rows() {
            for r in ranges {
                data.extend_from_slice(&row[r.clone()]);
            }
        }
        Self::new(self.heads, self.query_tokens, width, data)
    }
}

/// Per-token key vectors `[N_v, D_k]` with their squared norms cached.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyStates {
    vectors: Matrix,
    norms: Vec<f64>,
}

impl KeyStates {
    pub fn new(vectors: Matrix) -> Result<Self, TokenBudgetError> {
        if !vectors.is_finite() {
            return Err(TokenBudgetError::NonFiniteKeys);
        }
        let norms = (0..vectors.rows()).map(|i| squared_norm(vectors.row(i))).collect();
        Ok(Self { vectors, norms })
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.vectors.row(i)
    }

    pub fn gather(&self, rows: impl IntoIterator<Item = usize>) -> Self {
        let rows: Vec<usize> = rows.into_iter().collect();
        let norms = rows.iter().map(|&r| self.norms[r]).collect();
        Self {
            vectors: self.vectors.gather_rows(rows),
            norms,
        }
    }

    fn cosine(&self, a: usize, b: usize) -> f64 {
        cosine_from_parts(dot(self.row(a), self.row(b)), self.norms[a], self.norms[b])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenScoreTable {
    pub s_token: Vec<f32>,
}

impl TokenScoreTable {
    pub fn len(&self) -> usize {
        self.s_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s_token.is_empty()
    }
}

/// How the total token budget is expressed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TokenBudget {
    /// Absolute token count `B_T`.
    Tokens(usize),
    /// Retention ratio `ρ ∈ (0, 1]`; `B_T = round(ρ · N_v)`.
    Ratio(f64),
}

impl TokenBudget {
    pub fn resolve(self, visual_tokens: usize) -> usize {
        match self {
            TokenBudget::Tokens(n) => n.min(visual_tokens),
            TokenBudget::Ratio(r) => ((r * visual_tokens as f64).round() as usize).min(visual_tokens),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetConfig {
    pub total: TokenBudget,
    /// Fraction of `B_T` reserved for core tokens.
    pub core_ratio: f64,
    /// Seeds per keyframe, `k_s`.
    pub seeds_per_frame: usize,
    /// Diversity weight `λ`.
    pub lambda: f32,
}

impl BudgetConfig {
    pub const DEFAULT_CORE_RATIO: f64 = 0.25;
    pub const DEFAULT_SEEDS: usize = 4;
    pub const DEFAULT_LAMBDA: f32 = 0.5;

    pub fn new(
        total: TokenBudget,
        core_ratio: f64,
        seeds_per_frame: usize,
        lambda: f32,
    ) -> Result<Self, TokenBudgetError> {
        match total {
            TokenBudget::Tokens(0) => {
                return Err(TokenBudgetError::InvalidConfig("token budget must be positive".into()))
            }
            TokenBudget::Ratio(r) if !(r > 0.0 && r <= 1.0) => {
                return Err(TokenBudgetError::InvalidConfig(format!(
                    "retention ratio {r} outside (0, 1]"
                )))
            }
            _ => {}
        }
        if !(0.0..=1.0).contains(&core_ratio) {
            return Err(TokenBudgetError::InvalidConfig(format!(
                "core ratio {core_ratio} outside [0, 1]"
            )));
        }
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(TokenBudgetError::InvalidConfig(format!(
                "lambda {lambda} must be finite and >= 0"
            )));
        }
        Ok(Self {
            total,
            core_ratio,
            seeds_per_frame,
            lambda,
        })
    }

    pub fn with_ratio(retention: f64) -> Result<Self, TokenBudgetError> {
        Self::new(
            TokenBudget::Ratio(retention),
            Self::DEFAULT_CORE_RATIO,
            Self::DEFAULT_SEEDS,
            Self::DEFAULT_LAMBDA,
        )
    }

    /// `floor(core_ratio · B_T)`, raised to 1 when both factors are nonzero.
    pub fn core_budget(&self, total: usize) -> usize {
        if total == 0 || self.core_ratio <= 0.0 {
            return 0;
        }
        ((self.core_ratio * total as f64).floor() as usize).clamp(1, total)
    }
}

/// Phase-two picks for one keyframe.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTokens {
    /// Context budget `B(f)` granted to this keyframe.
    pub budget: usize,
    pub seeds: Vec<usize>,
    pub context: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSelection {
    pub core: Vec<usize>,
    pub per_frame: Vec<FrameTokens>,
    /// Sorted union of core, seed and context tokens.
    pub final_tokens: Vec<usize>,
}

/// Mean attention each visual token receives over all heads and query tokens.
///
/// Each column is accumulated in `f64` in head-major, query-token order, so
/// the result does not depend on how columns are split across threads.
pub fn token_importance(attention: &AttentionTensor) -> TokenScoreTable {
    const COLUMN_CHUNK: usize = 2048;
    let nv = attention.visual_tokens();
    let count = (attention.heads() * attention.query_tokens()) as f64;
    let mut s_token = vec![0.0f32; nv];
    s_token.par_chunks_mut(COLUMN_CHUNK).enumerate().for_each(|(c, out)| {
        let lo = c * COLUMN_CHUNK;
        let mut acc = vec![0.0f64; out.len()];
        for row in attention.rows() {
            for (a, &x) in acc.iter_mut().zip(&row[lo..lo + out.len()]) {
                *a += x as f64;
            }
        }
        for (o, a) in out.iter_mut().zip(acc) {
            *o = (a / count) as f32;
        }
    });
    TokenScoreTable { s_token }
}

/// The `b_core` highest-importance tokens, ascending.
pub fn select_core(scores: &TokenScoreTable, b_core: usize) -> Vec<usize> {
    top_k(&scores.s_token, b_core)
}

/// Splits `b_context` over keyframes in proportion to their frame scores by
/// largest remainder, never exceeding `capacities[f]`.
pub fn distribute_context_budget(keyframes: &KeyframeSelection, b_context: usize, capacities: &[usize]) -> Vec<usize> {
    let weights: Vec<f64> = keyframes.frame_scores.iter().map(|&s| s.max(0.0) as f64).collect();
    apportion(&weights, b_context, &vec![0; weights.len()], capacities).allocations
}

/// `min(k_s, B(f), |C_f|)` highest-importance candidates, ascending.
pub fn select_seeds(
    candidates: &[usize],
    scores: &TokenScoreTable,
    seeds_per_frame: usize,
    frame_budget: usize,
) -> Vec<usize> {
    top_k_of(&scores.s_token, candidates.to_vec(), seeds_per_frame.min(frame_budget))
}

/// Batched MMR: scores every candidate once against the fixed seed set and
/// keeps the top `m` by `s_token - λ · max_seed cos`. Context picks never join
/// the penalty set. With no seeds the penalty is 0.
pub fn batched_mmr(
    candidates: &[usize],
    seeds: &[usize],
    m: usize,
    lambda: f32,
    keys: &KeyStates,
    scores: &TokenScoreTable,
) -> Vec<usize> {
    let mut candidates = candidates.to_vec();
    candidates.sort_unstable();
    if m >= candidates.len() {
        return candidates;
    }
    let lambda = lambda as f64;
    let adjusted: Vec<f64> = candidates
        .iter()
        .map(|&c| {
            let penalty = if seeds.is_empty() {
                0.0
            } else {
                seeds
                    .iter()
                    .map(|&s| keys.cosine(c, s))
                    .fold(f64::NEG_INFINITY, f64::max)
            };
            scores.s_token[c] as f64 - lambda * penalty
        })
        .collect();
    let mut picked: Vec<usize> = top_k(&adjusted, m).into_iter().map(|p| candidates[p]).collect();
    picked.sort_unstable();
    picked
}

/// Forms the sorted union, rejecting any index claimed twice.
pub fn assemble_selection(core: Vec<usize>, per_frame: Vec<FrameTokens>) -> Result<TokenSelection, TokenBudgetError> {
    let mut final_tokens: Vec<usize> = core.clone();
    for f in &per_frame {
        final_tokens.extend_from_slice(&f.seeds);
        final_tokens.extend_from_slice(&f.context);
    }
    final_tokens.sort_unstable();
    if let Some(w) = final_tokens.windows(2).find(|w| w[0] == w[1]) {
        return Err(TokenBudgetError::Inconsistent(format!("token {} selected twice", w[0])));
    }
    Ok(TokenSelection {
        core,
        per_frame,
        final_tokens,
    })
}

/// Runs both phases over the keyframes' tokens.
///
/// `attention` and `keys` cover exactly the keyframes' tokens, frame-major.
pub fn run_token_budgeting(
    attention: &AttentionTensor,
    keys: &KeyStates,
    keyframes: &KeyframeSelection,
    config: &BudgetConfig,
) -> Result<TokenSelection, TokenBudgetError> {
    let nv = attention.visual_tokens();
    let m = keyframes.len();
    if m == 0 || !nv.is_multiple_of(m) {
        return Err(TokenBudgetError::DimensionMismatch {
            what: "visual tokens per keyframe",
            expected: m,
            found: nv,
        });
    }
    if keys.len() != nv {
        return Err(TokenBudgetError::DimensionMismatch {
            what: "key state rows",
            expected: nv,
            found: keys.len(),
        });
    }
    let per_frame_tokens = nv / m;

    let scores = token_importance(attention);
    let total = config.total.resolve(nv);
    let core = select_core(&scores, config.core_budget(total));

    let mut is_core = vec![false; nv];
    core.iter().for_each(|&j| is_core[j] = true);
    let candidates: Vec<Vec<usize>> = (0..m)
        .map(|f| {
            (f * per_frame_tokens..(f + 1) * per_frame_tokens)
                .filter(|&j| !is_core[j])
                .collect()
        })
        .collect();
    let capacities: Vec<usize> = candidates.iter().map(Vec::len).collect();
    let budgets = distribute_context_budget(keyframes, total - core.len(), &capacities);

    let per_frame: Vec<FrameTokens> = candidates
        .par_iter()
        .zip(budgets.par_iter())
        .map(|(cands, &budget)| {
            let seeds = select_seeds(cands, &scores, config.seeds_per_frame, budget);
            let rest: Vec<usize> = cands
                .iter()
                .copied()
                .filter(|c| seeds.binary_search(c).is_err())
                .collect();
            let context = batched_mmr(
                &rest,
                &seeds,
                budget.saturating_sub(seeds.len()),
                config.lambda,
                keys,
                &scores,
            );
            FrameTokens { budget, seeds, context }
        })
        .collect();

    assemble_selection(core, per_frame)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scores(v: &[f32]) -> TokenScoreTable {
        TokenScoreTable { s_token: v.to_vec() }
    }

    fn keys(rows: &[Vec<f32>]) -> KeyStates {
        KeyStates::new(Matrix::from_rows(rows).unwrap()).unwrap()
    }

    fn keyframes(scores: &[f32]) -> KeyframeSelection {
        KeyframeSelection {
            frame_indices: (0..scores.len()).collect(),
            frame_scores: scores.to_vec(),
        }
    }

    fn random_instance(
        rng: &mut ChaCha8Rng,
        frames: usize,
        per_frame: usize,
        dk: usize,
    ) -> (AttentionTensor, KeyStates) {
        let (h, q) = (2, 3);
        let nv = frames * per_frame;
        let att: Vec<f32> = (0..h * q * nv).map(|_| rng.random::<f32>()).collect();
        let k: Vec<f32> = (0..nv * dk).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect();
        (
            AttentionTensor::new(h, q, nv, att).unwrap(),
            KeyStates::new(Matrix::new(nv, dk, k).unwrap()).unwrap(),
        )
    }

    #[test]
    fn attention_validation() {
        assert!(matches!(
            AttentionTensor::new(0, 1, 1, vec![]),
            Err(TokenBudgetError::EmptyAttention(..))
        ));
        assert_eq!(
            AttentionTensor::new(1, 1, 2, vec![0.5, -0.1]),
            Err(TokenBudgetError::InvalidAttention)
        );
        assert_eq!(
            AttentionTensor::new(1, 1, 2, vec![0.5, f32::NAN]),
            Err(TokenBudgetError::InvalidAttention)
        );
        assert!(matches!(
            AttentionTensor::new(1, 2, 2, vec![0.5; 3]),
            Err(TokenBudgetError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn uniform_attention() {
        let a = AttentionTensor::new(3, 5, 8, vec![1.0 / 8.0; 120]).unwrap();
        assert!(token_importance(&a).s_token.iter().all(|&s| s == 0.125));
    }

    #[test]
    fn single_row_passes_through() {
        let row = vec![0.1, 0.7, 0.2];
        let a = AttentionTensor::new(1, 1, 3, row.clone()).unwrap();
        assert_eq!(token_importance(&a).s_token, row);
    }

    #[test]
    fn importance_across_column_chunks() {
        let nv = 5000;
        let data: Vec<f32> = (0..2 * nv).map(|i| (i % 7) as f32).collect();
        let a = AttentionTensor::new(2, 1, nv, data).unwrap();
        let s = token_importance(&a).s_token;
        for j in [0, 2047, 2048, 4999] {
            assert_eq!(s[j], ((j % 7) as f32 + ((nv + j) % 7) as f32) / 2.0);
        }
    }

    #[test]
    fn restrict_columns_concatenates_ranges() {
        let a = AttentionTensor::new(1, 2, 4, vec![0., 1., 2., 3., 4., 5., 6., 7.]).unwrap();
        let r = a.restrict_columns(&[3..4, 0..1]).unwrap();
        assert_eq!(r.as_slice(), &[3., 0., 7., 4.]);
        assert!(a.restrict_columns(&[2..5, 0..1]).is_err());
    }

    #[test]
    fn core_examples() {
        assert!(select_core(&scores(&[0.3, 0.2]), 0).is_empty());
        assert_eq!(select_core(&scores(&[0.1, 0.4, 0.4, 0.2]), 2), vec![1, 2]);
    }

    #[test]
    fn core_budget_rounding() {
        let cfg = |r| BudgetConfig::new(TokenBudget::Tokens(10), r, 4, 0.5).unwrap();
        assert_eq!(cfg(0.25).core_budget(10), 2);
        assert_eq!(cfg(0.01).core_budget(10), 1);
        assert_eq!(cfg(0.0).core_budget(10), 0);
        assert_eq!(cfg(1.0).core_budget(10), 10);
        assert_eq!(cfg(0.25).core_budget(0), 0);
    }

    #[test]
    fn config_validation() {
        assert!(BudgetConfig::new(TokenBudget::Tokens(0), 0.25, 4, 0.5).is_err());
        assert!(BudgetConfig::new(TokenBudget::Ratio(0.0), 0.25, 4, 0.5).is_err());
        assert!(BudgetConfig::new(TokenBudget::Ratio(1.5), 0.25, 4, 0.5).is_err());
        assert!(BudgetConfig::new(TokenBudget::Ratio(1.0), 1.1, 4, 0.5).is_err());
        assert!(BudgetConfig::new(TokenBudget::Ratio(1.0), 0.2, 4, -1.0).is_err());
        assert_eq!(TokenBudget::Ratio(0.5).resolve(7), 4);
        assert_eq!(TokenBudget::Tokens(50).resolve(7), 7);
    }

    #[test]
    fn context_budget_examples() {
        let big = [100, 100];
        assert_eq!(distribute_context_budget(&keyframes(&[2.0, 2.0]), 4, &big), vec![2, 2]);
        assert_eq!(distribute_context_budget(&keyframes(&[3.0, 1.0]), 4, &big), vec![3, 1]);
        assert_eq!(distribute_context_budget(&keyframes(&[1.0, 1.0]), 3, &big), vec![2, 1]);
        assert_eq!(
            distribute_context_budget(&keyframes(&[0.0, 0.0, 0.0]), 4, &[9, 9, 9]),
            vec![2, 1, 1]
        );
        assert_eq!(
            distribute_context_budget(&keyframes(&[5.0, 1.0]), 6, &[2, 9]),
            vec![2, 4]
        );
    }

    #[test]
    fn seed_examples() {
        let s = scores(&[0.2, 0.9, 0.5]);
        assert!(select_seeds(&[0, 1, 2], &s, 0, 3).is_empty());
        assert_eq!(select_seeds(&[0, 1, 2], &s, 3, 1), vec![1]);
        assert_eq!(select_seeds(&[0, 1, 2], &s, 2, 3), vec![1, 2]);
        assert_eq!(select_seeds(&[0, 2], &s, 5, 5), vec![0, 2]);
    }

    #[test]
    fn mmr_without_penalty_is_pure_relevance() {
        let s = scores(&[0.1, 0.5, 0.3, 0.9, 0.2]);
        let k = keys(&vec![vec![1.0, 0.0]; 5]);
        assert_eq!(batched_mmr(&[0, 1, 2, 4], &[3], 2, 0.0, &k, &s), vec![1, 2]);
        assert_eq!(batched_mmr(&[0, 1, 2, 4], &[], 2, 5.0, &k, &s), vec![1, 2]);
    }

    #[test]
    fn mmr_excludes_seed_duplicate() {
        // Token 1 duplicates seed 0's key; token 2 is orthogonal with a lower score.
        let s = scores(&[0.9, 0.8, 0.3, 0.1]);
        let k = keys(&[vec![1.0, 0.0], vec![2.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]]);
        assert_eq!(batched_mmr(&[1, 2, 3], &[0], 1, 0.0, &k, &s), vec![1]);
        assert_eq!(batched_mmr(&[1, 2, 3], &[0], 1, 0.6, &k, &s), vec![2]);
    }

    #[test]
    fn mmr_saturates() {
        let s = scores(&[0.1, 0.2, 0.3]);
        let k = keys(&[vec![1.0], vec![1.0], vec![1.0]]);
        assert_eq!(batched_mmr(&[2, 0], &[1], 10, 0.5, &k, &s), vec![0, 2]);
        assert!(batched_mmr(&[2, 0], &[1], 0, 0.5, &k, &s).is_empty());
    }

    #[test]
    fn mmr_zero_norm_keys_have_no_penalty() {
        let s = scores(&[0.5, 0.2, 0.25]);
        let k = keys(&[vec![1.0, 0.0], vec![0.0, 0.0], vec![1.0, 0.0]]);
        assert_eq!(batched_mmr(&[1, 2], &[0], 1, 1.0, &k, &s), vec![1]);
    }

    #[test]
    fn assemble_examples() {
        let sel = assemble_selection(
            vec![0],
            vec![FrameTokens {
                budget: 2,
                seeds: vec![5],
                context: vec![3],
            }],
        )
        .unwrap();
        assert_eq!(sel.final_tokens, vec![0, 3, 5]);

        let sel = assemble_selection(
            vec![1, 4],
            vec![FrameTokens {
                budget: 0,
                seeds: vec![],
                context: vec![],
            }],
        )
        .unwrap();
        assert_eq!(sel.final_tokens, vec![1, 4]);

        let err = assemble_selection(
            vec![1],
            vec![FrameTokens {
                budget: 1,
                seeds: vec![],
                context: vec![1],
            }],
        );
        assert!(matches!(err, Err(TokenBudgetError::Inconsistent(_))));
    }

    #[test]
    fn full_retention_keeps_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (att, k) = random_instance(&mut rng, 3, 10, 4);
        let cfg = BudgetConfig::with_ratio(1.0).unwrap();
        let sel = run_token_budgeting(&att, &k, &keyframes(&[0.2, 0.5, 0.3]), &cfg).unwrap();
        assert_eq!(sel.final_tokens, (0..30).collect::<Vec<_>>());
    }

    #[test]
    fn core_only_budget_is_global_top() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (att, k) = random_instance(&mut rng, 4, 8, 4);
        let cfg = BudgetConfig::new(TokenBudget::Tokens(10), 1.0, 4, 0.5).unwrap();
        let sel = run_token_budgeting(&att, &k, &keyframes(&[0.2, 0.5, 0.3, 0.9]), &cfg).unwrap();
        assert!(sel.per_frame.iter().all(|f| f.seeds.is_empty() && f.context.is_empty()));
        assert_eq!(sel.final_tokens, top_k(&token_importance(&att).s_token, 10));
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (att, k) = random_instance(&mut rng, 3, 5, 4);
        let cfg = BudgetConfig::with_ratio(0.5).unwrap();
        assert!(run_token_budgeting(&att, &k, &keyframes(&[1.0, 1.0]), &cfg).is_err());
        let short = k.gather(0..10);
        assert!(run_token_budgeting(&att, &short, &keyframes(&[1.0, 1.0, 1.0]), &cfg).is_err());
    }

    #[test]
    fn softmax_rows_average_to_unit_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (h, q, nv) = (4, 6, 50);
        let mut data = Vec::new();
        for _ in 0..h * q {
            let logits: Vec<f32> = (0..nv).map(|_| rng.random::<f32>() * 4.0).collect();
            let z: f32 = logits.iter().map(|x| x.exp()).sum();
            data.extend(logits.iter().map(|x| x.exp() / z));
        }
        let s = token_importance(&AttentionTensor::new(h, q, nv, data).unwrap());
        let total: f64 = s.s_token.iter().map(|&x| x as f64).sum();
        assert!((total - 1.0).abs() < 1e-5);
    }

    proptest! {
        #[test]
        fn budget_conservation_and_disjointness(
            seed in 0u64..1000,
            frames in 1usize..6,
            per_frame in 1usize..20,
            retention in 0.05f64..1.0,
            core_ratio in 0.0f64..1.0,
            seeds in 0usize..6,
            lambda in 0.0f32..2.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (att, k) = random_instance(&mut rng, frames, per_frame, 4);
            let fs: Vec<f32> = (0..frames).map(|_| rng.random::<f32>()).collect();
            let cfg = BudgetConfig::new(TokenBudget::Ratio(retention), core_ratio, seeds, lambda).unwrap();
            let sel = run_token_budgeting(&att, &k, &keyframes(&fs), &cfg).unwrap();
            let nv = frames * per_frame;
            prop_assert_eq!(sel.final_tokens.len(), TokenBudget::Ratio(retention).resolve(nv));
            let parts = sel.core.len() + sel.per_frame.iter().map(|f| f.seeds.len() + f.context.len()).sum::<usize>();
            prop_assert_eq!(parts, sel.final_tokens.len());
            for (f, ft) in sel.per_frame.iter().enumerate() {
                let range = f * per_frame..(f + 1) * per_frame;
                prop_assert!(ft.seeds.iter().chain(&ft.context).all(|t| range.contains(t)));
                prop_assert_eq!(ft.seeds.len() + ft.context.len(), ft.budget);
            }
        }

        #[test]
        fn core_is_invariant_to_positive_scaling(seed in 0u64..1000, c in prop::sample::select(vec![0.01f32, 1.0, 100.0]), b in 0usize..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (att, _) = random_instance(&mut rng, 3, 10, 2);
            let scaled = AttentionTensor::new(2, 3, 30, att.as_slice().iter().map(|x| x * c).collect()).unwrap();
            prop_assert_eq!(
                select_core(&token_importance(&att), b),
                select_core(&token_importance(&scaled), b)
            );
        }

        #[test]
        fn within_frame_permutation_is_equivariant(seed in 0u64..500, lambda in 0.0f32..1.5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (frames, per_frame) = (3, 12);
            let nv = frames * per_frame;
            let (att, k) = random_instance(&mut rng, frames, per_frame, 4);
            // perm[new] = old, shuffling only inside each frame's range.
            let mut perm: Vec<usize> = (0..nv).collect();
            for f in 0..frames {
                let slice = &mut perm[f * per_frame..(f + 1) * per_frame];
                for i in (1..slice.len()).rev() {
                    slice.swap(i, rng.random_range(0..=i));
                }
            }
            let mut inverse = vec![0; nv];
            perm.iter().enumerate().for_each(|(new, &old)| inverse[old] = new);
            let mut pdata = Vec::new();
            for row in att.rows() {
                pdata.extend(perm.iter().map(|&old| row[old]));
            }
            let patt = AttentionTensor::new(att.heads(), att.query_tokens(), nv, pdata).unwrap();
            let pk = k.gather(perm.iter().copied());

            let s = token_importance(&att).s_token;
            let ps = token_importance(&patt).s_token;
            for old in 0..nv {
                prop_assert_eq!(s[old].to_bits(), ps[inverse[old]].to_bits());
            }

            let kf = keyframes(&[0.3, 0.9, 0.5]);
            let cfg = BudgetConfig::new(TokenBudget::Ratio(0.5), 0.25, 3, lambda).unwrap();
            let a = run_token_budgeting(&att, &k, &kf, &cfg).unwrap();
            let b = run_token_budgeting(&patt, &pk, &kf, &cfg).unwrap();
            let mapped = |v: &[usize]| {
                let mut out: Vec<usize> = v.iter().map(|&old| inverse[old]).collect();
                out.sort_unstable();
                out
            };
            prop_assert_eq!(mapped(&a.core), b.core.clone());
            prop_assert_eq!(mapped(&a.final_tokens), b.final_tokens.clone());
            for (fa, fb) in a.per_frame.iter().zip(&b.per_frame) {
                prop_assert_eq!(mapped(&fa.seeds), fb.seeds.clone());
                prop_assert_eq!(mapped(&fa.context), fb.context.clone());
            }
        }

        #[test]
        fn larger_lambda_never_increases_seed_similarity(seed in 0u64..1000, m in 1usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (att, k) = random_instance(&mut rng, 1, 24, 4);
            let s = token_importance(&att);
            let seeds = vec![0, 1, 2];
            let cands: Vec<usize> = (3..24).collect();
            let penalty = |picked: &[usize]| -> f64 {
                picked.iter().map(|&c| seeds.iter().map(|&x| k.cosine(c, x)).fold(f64::NEG_INFINITY, f64::max)).sum()
            };
            let mut last = f64::INFINITY;
            for lambda in [0.0f32, 0.1, 0.3, 0.7, 1.5, 4.0] {
                let p = penalty(&batched_mmr(&cands, &seeds, m, lambda, &k, &s));
                prop_assert!(p <= last + 1e-9, "lambda {} raised seed similarity {} -> {}", lambda, last, p);
                last = p;
            }
        }
    }
}
