//! Brute-force reference implementations for cross-checking the engine.
//!
//! Nothing here calls into `linalg`, `select` or `apportion`; every loop is
//! written out so that agreement with the engine is evidence, not tautology.
//! Single-threaded and slow; meant for instances of a few hundred tokens.

use crate::token::{AttentionTensor, KeyStates, TokenScoreTable};

/// Mean attention per visual token via an explicit `j, h, i` triple loop.
pub fn naive_token_importance(attention: &AttentionTensor) -> TokenScoreTable {
    let (heads, queries, tokens) = (attention.heads(), attention.query_tokens(), attention.visual_tokens());
    let mut s_token = Vec::with_capacity(tokens);
    for j in 0..tokens {
        let mut total = 0.0f64;
        for h in 0..heads {
            for i in 0..queries {
                total += attention.get(h, i, j) as f64;
            }
        }
        s_token.push((total / (heads * queries) as f64) as f32);
    }
    TokenScoreTable { s_token }
}

/// Stable full sort by descending value, take `k`, return ascending indices.
pub fn exhaustive_topk(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    // Stable sort on an index-ordered list keeps equal values in index order.
    order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).expect("finite values"));
    order.truncate(k);
    order.sort();
    order
}

fn explicit_cosine(keys: &KeyStates, a: usize, b: usize) -> f64 {
    let (va, vb) = (keys.row(a), keys.row(b));
    let mut dot = 0.0f64;
    let mut sq_a = 0.0f64;
    let mut sq_b = 0.0f64;
    for (x, y) in va.iter().zip(vb) {
        dot += *x as f64 * *y as f64;
    }
    for x in va {
        sq_a += *x as f64 * *x as f64;
    }
    for y in vb {
        sq_b += *y as f64 * *y as f64;
    }
    if sq_a * sq_b == 0.0 {
        0.0
    } else {
        dot / (sq_a * sq_b).sqrt()
    }
}

fn max_similarity(keys: &KeyStates, token: usize, against: &[usize]) -> f64 {
    if against.is_empty() {
        return 0.0;
    }
    let mut best = f64::NEG_INFINITY;
    for &s in against {
        let c = explicit_cosine(keys, token, s);
        if c > best {
            best = c;
        }
    }
    best
}

/// Direct evaluation of the seed-penalized objective for every candidate,
/// followed by [`exhaustive_topk`].
pub fn direct_mmr_eval(
    candidates: &[usize],
    seeds: &[usize],
    m: usize,
    lambda: f32,
    keys: &KeyStates,
    scores: &TokenScoreTable,
) -> Vec<usize> {
    let mut candidates = candidates.to_vec();
    candidates.sort();
    let mut adjusted = Vec::with_capacity(candidates.len());
    for &c in &candidates {
        adjusted.push(scores.s_token[c] as f64 - lambda as f64 * max_similarity(keys, c, seeds));
    }
    let mut picked: Vec<usize> = exhaustive_topk(&adjusted, m)
        .into_iter()
        .map(|p| candidates[p])
        .collect();
    picked.sort();
    picked
}

/// Classic greedy MMR: every pick joins the penalty set for later steps.
pub fn classic_sequential_mmr(
    candidates: &[usize],
    seeds: &[usize],
    m: usize,
    lambda: f32,
    keys: &KeyStates,
    scores: &TokenScoreTable,
) -> Vec<usize> {
    let mut pool: Vec<usize> = candidates.to_vec();
    pool.sort();
    let mut penalty_set: Vec<usize> = seeds.to_vec();
    let mut picked = Vec::new();
    while picked.len() < m && !pool.is_empty() {
        let mut best_pos = 0;
        let mut best_val = f64::NEG_INFINITY;
        for (pos, &c) in pool.iter().enumerate() {
            let val = scores.s_token[c] as f64 - lambda as f64 * max_similarity(keys, c, &penalty_set);
            if val > best_val {
                best_val = val;
                best_pos = pos;
            }
        }
        let chosen = pool.remove(best_pos);
        picked.push(chosen);
        penalty_set.push(chosen);
    }
    picked.sort();
    picked
}
