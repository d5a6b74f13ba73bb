//! Frame-level budgeting: importance scoring of candidate frames and
//! adaptive temporal bucketing down to a keyframe budget.
//!
//! Each candidate frame gets three raw component scores:
//!
//! * scene change, `1 - cos(p[i-1], p[i])` over pixel vectors,
//! * motion intensity, `‖p[i] - p[i-1]‖₂`,
//! * query relevance, `cos(e[i], q)` over semantic embeddings.
//!
//! Frame 0 has no predecessor, so its change and motion are 0. Each component
//! is min-max normalized over the candidates before the weighted sum, which
//! puts all three on the same `[0, 1]` scale.
//!
//! Bucketing cuts the candidates into `K` contiguous spans, gives every span
//! one keyframe, and spreads the remaining `M - K` keyframes in proportion to
//! the span's summed frame scores.

use rayon::prelude::*;
use thiserror::Error;

use crate::apportion::apportion;
use crate::linalg::{cosine, l2_distance, Matrix};
use crate::select::top_k_of;

#[derive(Debug, Error, PartialEq)]
pub enum FrameBudgetError {
    #[error("no candidate frames")]
    Empty,
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{0} contains NaN or infinite values")]
    NonFinite(&'static str),
    #[error("timestamps must be strictly increasing (violated at position {0})")]
    TimestampsNotIncreasing(usize),
    #[error("invalid score weights: {0}")]
    InvalidWeights(String),
    #[error("invalid keyframe budget: {0}")]
    InvalidBudget(String),
}

/// The `N` candidate frames: pixel vectors `[N, D_p]`, embeddings `[N, D_e]`
/// and their source timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatureSet {
    pixels: Matrix,
    embeddings: Matrix,
    timestamps: Vec<i64>,
}

impl FrameFeatureSet {
    pub fn new(pixels: Matrix, embeddings: Matrix, timestamps: Vec<i64>) -> Result<Self, FrameBudgetError> {
        let n = pixels.rows();
        if n == 0 {
            return Err(FrameBudgetError::Empty);
        }
        if embeddings.rows() != n {
            return Err(FrameBudgetError::DimensionMismatch {
                what: "frame embeddings rows",
                expected: n,
                found: embeddings.rows(),
            });
        }
        if timestamps.len() != n {
            return Err(FrameBudgetError::DimensionMismatch {
                what: "timestamps",
                expected: n,
                found: timestamps.len(),
            });
        }
        if !pixels.is_finite() {
            return Err(FrameBudgetError::NonFinite("pixel vectors"));
        }
        if !embeddings.is_finite() {
            return Err(FrameBudgetError::NonFinite("frame embeddings"));
        }
        if let Some(i) = timestamps.windows(2).position(|w| w[1] <= w[0]) {
            return Err(FrameBudgetError::TimestampsNotIncreasing(i + 1));
        }
        Ok(Self {
            pixels,
            embeddings,
            timestamps,
        })
    }

    /// Candidate set with timestamps `0..N`.
    pub fn with_default_timestamps(pixels: Matrix, embeddings: Matrix) -> Result<Self, FrameBudgetError> {
        let n = pixels.rows() as i64;
        Self::new(pixels, embeddings, (0..n).collect())
    }

    pub fn len(&self) -> usize {
        self.pixels.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixels(&self) -> &Matrix {
        &self.pixels
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn timestamps(&self) -> &[i64] {
        &self.timestamps
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryEmbedding(Vec<f32>);

impl QueryEmbedding {
    pub fn new(vector: Vec<f32>) -> Result<Self, FrameBudgetError> {
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(FrameBudgetError::NonFinite("query embedding"));
        }
        Ok(Self(vector))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }
}

/// Relative weights of the change, motion and relevance components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreWeights {
    change: f32,
    motion: f32,
    relevance: f32,
}

impl ScoreWeights {
    pub fn new(change: f32, motion: f32, relevance: f32) -> Result<Self, FrameBudgetError> {
        let all = [change, motion, relevance];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(FrameBudgetError::InvalidWeights(format!(
                "weights must be finite and non-negative, got {all:?}"
            )));
        }
        if change + motion + relevance <= 0.0 {
            return Err(FrameBudgetError::InvalidWeights("weights sum to zero".into()));
        }
        Ok(Self {
            change,
            motion,
            relevance,
        })
    }

    pub fn change(&self) -> f32 {
        self.change
    }

    pub fn motion(&self) -> f32 {
        self.motion
    }

    pub fn relevance(&self) -> f32 {
        self.relevance
    }
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self {
            change: 1.0 / 3.0,
            motion: 1.0 / 3.0,
            relevance: 1.0 / 3.0,
        }
    }
}

/// Normalized component scores and the combined score of every candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameScoreTable {
    pub s_change: Vec<f32>,
    pub s_motion: Vec<f32>,
    pub s_relevance: Vec<f32>,
    pub s_frame: Vec<f32>,
}

impl FrameScoreTable {
    pub fn len(&self) -> usize {
        self.s_frame.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s_frame.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BucketPlan {
    /// `K + 1` boundaries; bucket `k` spans `bucket_bounds[k]..bucket_bounds[k + 1]`.
    pub bucket_bounds: Vec<usize>,
    pub bucket_scores: Vec<f32>,
    pub allocations: Vec<usize>,
    /// Whether capacity clamping moved any allocation between buckets.
    pub clamped: bool,
}

impl BucketPlan {
    pub fn bucket_count(&self) -> usize {
        self.allocations.len()
    }

    pub fn bucket_size(&self, k: usize) -> usize {
        self.bucket_bounds[k + 1] - self.bucket_bounds[k]
    }

    pub fn keyframe_budget(&self) -> usize {
        self.allocations.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyframeSelection {
    pub frame_indices: Vec<usize>,
    pub frame_scores: Vec<f32>,
}

impl KeyframeSelection {
    pub fn len(&self) -> usize {
        self.frame_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_indices.is_empty()
    }
}

pub fn scene_change_scores(frames: &FrameFeatureSet) -> Vec<f32> {
    let px = frames.pixels();
    (0..frames.len())
        .into_par_iter()
        .map(|i| match i {
            0 => 0.0,
            _ => (1.0 - cosine(px.row(i - 1), px.row(i))) as f32,
        })
        .collect()
}

pub fn motion_scores(frames: &FrameFeatureSet) -> Vec<f32> {
    let px = frames.pixels();
    (0..frames.len())
        .into_par_iter()
        .map(|i| match i {
            0 => 0.0,
            _ => l2_distance(px.row(i), px.row(i - 1)) as f32,
        })
        .collect()
}

pub fn relevance_scores(frames: &FrameFeatureSet, query: &QueryEmbedding) -> Result<Vec<f32>, FrameBudgetError> {
    let emb = frames.embeddings();
    if emb.cols() != query.as_slice().len() {
        return Err(FrameBudgetError::DimensionMismatch {
            what: "query embedding",
            expected: emb.cols(),
            found: query.as_slice().len(),
        });
    }
    Ok((0..frames.len())
        .into_par_iter()
        .map(|i| cosine(emb.row(i), query.as_slice()) as f32)
        .collect())
}

/// Min-max normalization onto `[0, 1]`; a constant input maps to all zeros.
pub fn normalize_component(raw: &[f32]) -> Vec<f32> {
    let (lo, hi) = raw.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| {
        (lo.min(x), hi.max(x))
    });
    if raw.is_empty() || lo >= hi {
        return vec![0.0; raw.len()];
    }
    let (lo, range) = (lo as f64, hi as f64 - lo as f64);
    raw.iter().map(|&x| ((x as f64 - lo) / range) as f32).collect()
}

/// Normalizes three raw component vectors and forms the weighted sum.
pub fn combine_components(
    raw_change: &[f32],
    raw_motion: &[f32],
    raw_relevance: &[f32],
    weights: &ScoreWeights,
) -> FrameScoreTable {
    let s_change = normalize_component(raw_change);
    let s_motion = normalize_component(raw_motion);
    let s_relevance = normalize_component(raw_relevance);
    let s_frame = s_change
        .iter()
        .zip(&s_motion)
        .zip(&s_relevance)
        .map(|((&c, &m), &r)| weights.change * c + weights.motion * m + weights.relevance * r)
        .collect();
    FrameScoreTable {
        s_change,
        s_motion,
        s_relevance,
        s_frame,
    }
}

pub fn frame_importance(
    frames: &FrameFeatureSet,
    query: &QueryEmbedding,
    weights: &ScoreWeights,
) -> Result<FrameScoreTable, FrameBudgetError> {
    let relevance = relevance_scores(frames, query)?;
    Ok(combine_components(
        &scene_change_scores(frames),
        &motion_scores(frames),
        &relevance,
        weights,
    ))
}

/// Boundaries of `k` contiguous spans over `n` items; sizes differ by at most
/// one and the earlier spans take the surplus.
pub fn bucket_bounds(n: usize, k: usize) -> Vec<usize> {
    let (base, surplus) = (n / k, n % k);
    let mut bounds = Vec::with_capacity(k + 1);
    bounds.push(0);
    for b in 0..k {
        let last = *bounds.last().expect("nonempty");
        bounds.push(last + base + usize::from(b < surplus));
    }
    bounds
}

/// Splits the candidates into `buckets` chronological spans and allocates the
/// keyframe budget: one per span, plus the rest by largest remainder over the
/// spans' summed scores. `buckets` is reduced to `keyframes` when larger.
pub fn bucket_allocate(
    table: &FrameScoreTable,
    buckets: usize,
    keyframes: usize,
) -> Result<BucketPlan, FrameBudgetError> {
    let n = table.len();
    if keyframes == 0 {
        return Err(FrameBudgetError::InvalidBudget(
            "keyframe budget must be positive".into(),
        ));
    }
    if buckets == 0 {
        return Err(FrameBudgetError::InvalidBudget("bucket count must be positive".into()));
    }
    if keyframes > n {
        return Err(FrameBudgetError::InvalidBudget(format!(
            "keyframe budget {keyframes} exceeds {n} candidate frames"
        )));
    }
    let k = buckets.min(keyframes);
    let bucket_bounds = bucket_bounds(n, k);

    let weights: Vec<f64> = bucket_bounds
        .windows(2)
        .map(|w| table.s_frame[w[0]..w[1]].iter().fold(0.0f64, |acc, &s| acc + s as f64))
        .collect();
    let bucket_scores: Vec<f32> = weights.iter().map(|&w| w as f32).collect();
    let sizes: Vec<usize> = bucket_bounds.windows(2).map(|w| w[1] - w[0]).collect();

    let split = apportion(&weights, keyframes - k, &vec![1; k], &sizes);
    Ok(BucketPlan {
        bucket_bounds,
        bucket_scores,
        allocations: split.allocations,
        clamped: split.clamped,
    })
}

/// Takes the `n_k` best-scoring frames of every bucket (ties to the earlier
/// frame) and returns them in chronological order with their scores.
pub fn select_keyframes(table: &FrameScoreTable, plan: &BucketPlan) -> KeyframeSelection {
    let mut frame_indices = Vec::with_capacity(plan.keyframe_budget());
    for (k, &n_k) in plan.allocations.iter().enumerate() {
        let span: Vec<usize> = (plan.bucket_bounds[k]..plan.bucket_bounds[k + 1]).collect();
        frame_indices.extend(top_k_of(&table.s_frame, span, n_k));
    }
    let frame_scores = frame_indices.iter().map(|&i| table.s_frame[i]).collect();
    KeyframeSelection {
        frame_indices,
        frame_scores,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn frames(pixels: &[Vec<f32>], embeddings: &[Vec<f32>]) -> FrameFeatureSet {
        FrameFeatureSet::with_default_timestamps(
            Matrix::from_rows(pixels).unwrap(),
            Matrix::from_rows(embeddings).unwrap(),
        )
        .unwrap()
    }

    fn pixels_only(pixels: &[Vec<f32>]) -> FrameFeatureSet {
        let emb = vec![vec![1.0]; pixels.len()];
        frames(pixels, &emb)
    }

    fn table_from(s_frame: Vec<f32>) -> FrameScoreTable {
        let n = s_frame.len();
        FrameScoreTable {
            s_change: vec![0.0; n],
            s_motion: vec![0.0; n],
            s_relevance: vec![0.0; n],
            s_frame,
        }
    }

    #[test]
    fn feature_set_validation() {
        let m = |r: usize, c: usize| Matrix::new(r, c, vec![0.0; r * c]).unwrap();
        assert_eq!(
            FrameFeatureSet::with_default_timestamps(m(0, 2), m(0, 2)).unwrap_err(),
            FrameBudgetError::Empty
        );
        assert!(matches!(
            FrameFeatureSet::with_default_timestamps(m(2, 2), m(3, 2)),
            Err(FrameBudgetError::DimensionMismatch { .. })
        ));
        assert_eq!(
            FrameFeatureSet::new(m(3, 1), m(3, 1), vec![0, 2, 2]).unwrap_err(),
            FrameBudgetError::TimestampsNotIncreasing(2)
        );
        let nan = Matrix::new(1, 1, vec![f32::NAN]).unwrap();
        assert_eq!(
            FrameFeatureSet::with_default_timestamps(nan, m(1, 1)).unwrap_err(),
            FrameBudgetError::NonFinite("pixel vectors")
        );
    }

    #[test]
    fn scene_change_examples() {
        assert_eq!(
            scene_change_scores(&pixels_only(&[vec![1.0, 2.0], vec![1.0, 2.0]])),
            vec![0.0, 0.0]
        );
        assert_eq!(
            scene_change_scores(&pixels_only(&[vec![1.0, 0.0], vec![0.0, 1.0]])),
            vec![0.0, 1.0]
        );
        let h = std::f32::consts::FRAC_1_SQRT_2;
        let s = scene_change_scores(&pixels_only(&[vec![1.0, 0.0], vec![h, h]]));
        assert_eq!(s[0], 0.0);
        assert!((s[1] - 0.292_893_2).abs() < 1e-6);
        // A blank frame has cosine 0 with anything.
        assert_eq!(
            scene_change_scores(&pixels_only(&[vec![1.0, 0.0], vec![0.0, 0.0]])),
            vec![0.0, 1.0]
        );
    }

    #[test]
    fn motion_examples() {
        assert_eq!(motion_scores(&pixels_only(&vec![vec![2.0, 2.0]; 4])), vec![0.0; 4]);
        assert_eq!(
            motion_scores(&pixels_only(&[vec![0.0, 0.0], vec![3.0, 4.0]])),
            vec![0.0, 5.0]
        );
    }

    #[test]
    fn motion_matches_naive_recomputation() {
        let px = vec![
            vec![0.31, -1.2, 0.75, 2.0],
            vec![-0.4, 0.9, 0.05, 1.1],
            vec![1.7, 0.2, -0.66, 0.0],
        ];
        let got = motion_scores(&pixels_only(&px));
        for i in 1..3 {
            let diff: Vec<f32> = px[i].iter().zip(&px[i - 1]).map(|(a, b)| a - b).collect();
            let want = diff.iter().map(|d| d * d).sum::<f32>().sqrt();
            assert!((got[i] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn relevance_examples() {
        let q = QueryEmbedding::new(vec![0.6, 0.8]).unwrap();
        let f = frames(&[vec![0.0], vec![0.0]], &[vec![0.6, 0.8], vec![-0.6, -0.8]]);
        let r = relevance_scores(&f, &q).unwrap();
        assert!((r[0] - 1.0).abs() < 1e-6);
        assert!((r[1] + 1.0).abs() < 1e-6);

        let h = std::f32::consts::FRAC_1_SQRT_2;
        let q = QueryEmbedding::new(vec![1.0, 0.0]).unwrap();
        let f = frames(&vec![vec![0.0]; 3], &[vec![1.0, 0.0], vec![0.0, 1.0], vec![h, h]]);
        let r = relevance_scores(&f, &q).unwrap();
        assert_eq!(r[0], 1.0);
        assert_eq!(r[1], 0.0);
        assert!((r[2] - h).abs() < 1e-6);

        let bad = QueryEmbedding::new(vec![1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            relevance_scores(&f, &bad),
            Err(FrameBudgetError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_component(&[2.0, 4.0, 6.0]), vec![0.0, 0.5, 1.0]);
        assert_eq!(normalize_component(&[5.0, 5.0, 5.0]), vec![0.0, 0.0, 0.0]);
        assert_eq!(normalize_component(&[]), Vec::<f32>::new());
    }

    #[test]
    fn weights_validation() {
        assert!(ScoreWeights::new(0.0, 0.0, 0.0).is_err());
        assert!(ScoreWeights::new(-0.1, 0.5, 0.5).is_err());
        assert!(ScoreWeights::new(f32::NAN, 0.5, 0.5).is_err());
        assert!(ScoreWeights::new(0.0, 0.0, 1.0).is_ok());
    }

    #[test]
    fn change_only_weights_isolate_the_component() {
        let px = vec![vec![1.0, 0.0], vec![0.8, 0.6], vec![0.0, 1.0], vec![0.1, 1.0]];
        let f = frames(&px, &[vec![1.0], vec![0.5], vec![0.2], vec![0.9]]);
        let q = QueryEmbedding::new(vec![1.0]).unwrap();
        let t = frame_importance(&f, &q, &ScoreWeights::new(1.0, 0.0, 0.0).unwrap()).unwrap();
        assert_eq!(t.s_frame, normalize_component(&scene_change_scores(&f)));
    }

    #[test]
    fn planted_relevant_frame_wins_under_relevance_weights() {
        let q = vec![0.0, 0.0, 1.0, 0.0];
        let emb = vec![
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
            q.clone(),
            vec![0.0, 0.0, 0.0, 1.0],
            vec![-1.0, 0.0, 0.0, 0.0],
        ];
        let px: Vec<Vec<f32>> = (0..5).map(|i| vec![i as f32, 1.0]).collect();
        let f = frames(&px, &emb);
        let t = frame_importance(
            &f,
            &QueryEmbedding::new(q).unwrap(),
            &ScoreWeights::new(0.0, 0.0, 1.0).unwrap(),
        )
        .unwrap();
        let best = t.s_frame.iter().cloned().fold(f32::MIN, f32::max);
        let winners: Vec<usize> = (0..5).filter(|&i| t.s_frame[i] == best).collect();
        assert_eq!(winners, vec![2]);
    }

    #[test]
    fn weighted_sum_matches_straight_line_evaluation() {
        let px = vec![
            vec![0.2, 0.9, -0.3],
            vec![1.1, -0.4, 0.8],
            vec![0.5, 0.5, 0.5],
            vec![-0.7, 0.1, 1.9],
        ];
        let emb = vec![vec![0.3, -0.2], vec![0.9, 0.4], vec![-0.5, 0.7], vec![0.1, 0.1]];
        let qv = vec![0.8f32, -0.1];
        let f = frames(&px, &emb);
        let t = frame_importance(
            &f,
            &QueryEmbedding::new(qv.clone()).unwrap(),
            &ScoreWeights::new(0.3, 0.3, 0.4).unwrap(),
        )
        .unwrap();

        let cos = |a: &[f32], b: &[f32]| {
            let d: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f32 = a.iter().map(|x| x * x).sum::<f32>().sqrt();
            let nb: f32 = b.iter().map(|x| x * x).sum::<f32>().sqrt();
            d / (na * nb)
        };
        let minmax = |v: Vec<f32>| {
            let lo = v.iter().cloned().fold(f32::MAX, f32::min);
            let hi = v.iter().cloned().fold(f32::MIN, f32::max);
            v.iter().map(|x| (x - lo) / (hi - lo)).collect::<Vec<f32>>()
        };
        let mut change = vec![0.0];
        let mut motion = vec![0.0];
        for i in 1..4 {
            change.push(1.0 - cos(&px[i - 1], &px[i]));
            motion.push(
                px[i]
                    .iter()
                    .zip(&px[i - 1])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f32>()
                    .sqrt(),
            );
        }
        let rel: Vec<f32> = emb.iter().map(|e| cos(e, &qv)).collect();
        let (c, m, r) = (minmax(change), minmax(motion), minmax(rel));
        for i in 0..4 {
            let want = 0.3 * c[i] + 0.3 * m[i] + 0.4 * r[i];
            assert!(
                (t.s_frame[i] - want).abs() < 1e-6,
                "frame {i}: {} vs {want}",
                t.s_frame[i]
            );
        }
    }

    #[test]
    fn bucket_examples() {
        let t = table_from(vec![0.5; 6]);
        assert_eq!(bucket_allocate(&t, 2, 2).unwrap().allocations, vec![1, 1]);

        let t = table_from(vec![1.0, 1.0, 1.0, 0.5, 0.25, 0.25]);
        let plan = bucket_allocate(&t, 2, 4).unwrap();
        assert_eq!(plan.bucket_scores, vec![3.0, 1.0]);
        assert_eq!(plan.allocations, vec![3, 1]);

        let t = table_from(vec![0.9, 0.0, 0.3, 0.7]);
        assert_eq!(bucket_allocate(&t, 4, 4).unwrap().allocations, vec![1, 1, 1, 1]);
    }

    #[test]
    fn bucket_geometry() {
        assert_eq!(bucket_bounds(10, 3), vec![0, 4, 7, 10]);
        assert_eq!(bucket_bounds(4, 4), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn fewer_keyframes_than_buckets_reduces_bucket_count() {
        let plan = bucket_allocate(&table_from(vec![0.1; 9]), 8, 3).unwrap();
        assert_eq!(plan.bucket_count(), 3);
        assert_eq!(plan.allocations, vec![1, 1, 1]);
    }

    #[test]
    fn zero_scores_spread_round_robin() {
        let plan = bucket_allocate(&table_from(vec![0.0; 12]), 3, 8).unwrap();
        assert_eq!(plan.allocations, vec![3, 3, 2]);
    }

    #[test]
    fn overfull_bucket_is_clamped() {
        let plan = bucket_allocate(&table_from(vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0]), 2, 6).unwrap();
        assert!(plan.clamped);
        assert_eq!(plan.allocations, vec![3, 3]);
    }

    #[test]
    fn bucket_errors() {
        let t = table_from(vec![0.1; 4]);
        assert!(bucket_allocate(&t, 2, 5).is_err());
        assert!(bucket_allocate(&t, 0, 2).is_err());
        assert!(bucket_allocate(&t, 2, 0).is_err());
    }

    #[test]
    fn keyframe_examples() {
        let t = table_from(vec![0.4; 6]);
        let plan = bucket_allocate(&t, 2, 4).unwrap();
        assert_eq!(select_keyframes(&t, &plan).frame_indices, vec![0, 1, 3, 4]);

        let t = table_from(vec![0.1, 0.9, 0.5, 0.0, 0.0, 0.0]);
        let plan = BucketPlan {
            bucket_bounds: vec![0, 3, 6],
            bucket_scores: vec![1.5, 0.0],
            allocations: vec![2, 1],
            clamped: false,
        };
        let sel = select_keyframes(&t, &plan);
        assert_eq!(sel.frame_indices, vec![1, 2, 3]);
        assert_eq!(sel.frame_scores, vec![0.9, 0.5, 0.0]);

        let plan = BucketPlan {
            bucket_bounds: vec![0, 3, 6],
            bucket_scores: vec![1.5, 0.0],
            allocations: vec![3, 1],
            clamped: false,
        };
        assert_eq!(select_keyframes(&t, &plan).frame_indices, vec![0, 1, 2, 3]);
    }

    fn rank_of(scores: &[f32], i: usize) -> usize {
        crate::select::ranking(scores).iter().position(|&j| j == i).unwrap()
    }

    proptest! {
        #[test]
        fn normalization_is_affine_invariant(
            raw in prop::collection::vec(-100.0f32..100.0, 1..20),
            a in 0.1f32..10.0,
            b in -50.0f32..50.0,
        ) {
            let base = normalize_component(&raw);
            let moved: Vec<f32> = raw.iter().map(|x| a * x + b).collect();
            let spread = raw.iter().cloned().fold(f32::MIN, f32::max) - raw.iter().cloned().fold(f32::MAX, f32::min);
            prop_assume!(spread > 1e-2);
            for (x, y) in base.iter().zip(normalize_component(&moved)) {
                prop_assert!((x - y).abs() < 1e-4);
            }
        }

        #[test]
        fn raising_relevance_never_lowers_rank(
            change in prop::collection::vec(0.0f32..1.0, 6),
            motion in prop::collection::vec(0.0f32..5.0, 6),
            relevance in prop::collection::vec(-1.0f32..1.0, 6),
            w in (0.0f32..1.0, 0.0f32..1.0, 0.01f32..1.0),
            who in 0usize..6,
            bump in 0.0f32..1.0,
        ) {
            let weights = ScoreWeights::new(w.0, w.1, w.2).unwrap();
            let before = combine_components(&change, &motion, &relevance, &weights);
            let mut raised = relevance.clone();
            raised[who] += bump;
            let after = combine_components(&change, &motion, &raised, &weights);
            prop_assert!(rank_of(&after.s_frame, who) <= rank_of(&before.s_frame, who));
        }

        #[test]
        fn relevance_only_weights_select_by_relevance(
            scores in prop::collection::vec((0.0f32..1.0, 0.0f32..1.0, -1.0f32..1.0), 4..24),
            k in 1usize..5,
            extra in 0usize..6,
        ) {
            let n = scores.len();
            let m = (k + extra).min(n);
            let (c, rest): (Vec<f32>, Vec<(f32, f32)>) = scores.iter().map(|&(a, b, c)| (a, (b, c))).unzip();
            let (mo, r): (Vec<f32>, Vec<f32>) = rest.into_iter().unzip();
            let t = combine_components(&c, &mo, &r, &ScoreWeights::new(0.0, 0.0, 1.0).unwrap());
            let by_relevance = table_from(normalize_component(&r));
            let a = select_keyframes(&t, &bucket_allocate(&t, k, m).unwrap());
            let b = select_keyframes(&by_relevance, &bucket_allocate(&by_relevance, k, m).unwrap());
            prop_assert_eq!(a.frame_indices, b.frame_indices);
        }

        #[test]
        fn keyframe_budget_and_coverage(
            s in prop::collection::vec(0.0f32..1.0, 1..40),
            k in 1usize..10,
            m_frac in 0.0f64..1.0,
        ) {
            let n = s.len();
            let m = 1 + ((n - 1) as f64 * m_frac) as usize;
            let t = table_from(s);
            let plan = bucket_allocate(&t, k, m).unwrap();
            let sel = select_keyframes(&t, &plan);
            prop_assert_eq!(sel.len(), m);
            prop_assert!(sel.frame_indices.windows(2).all(|w| w[0] < w[1]));
            for b in 0..plan.bucket_count() {
                let lo = plan.bucket_bounds[b];
                let hi = plan.bucket_bounds[b + 1];
                prop_assert!(sel.frame_indices.iter().any(|&i| (lo..hi).contains(&i)));
                prop_assert!(plan.allocations[b] <= hi - lo);
            }
            for (j, &i) in sel.frame_indices.iter().enumerate() {
                prop_assert_eq!(sel.frame_scores[j], t.s_frame[i]);
            }
        }
    }
}
