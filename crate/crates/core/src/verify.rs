//! Cross-checks of the engine against the brute-force oracles.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::linalg::Matrix;
use crate::oracles::{classic_sequential_mmr, direct_mmr_eval, exhaustive_topk, naive_token_importance};
use crate::scenario::Scenario;
use crate::token::{
    batched_mmr, select_core, select_seeds, token_importance, AttentionTensor, KeyStates, TokenScoreTable,
};

pub const LAMBDA_GRID: [f32; 4] = [0.0, 0.3, 0.7, 1.5];
pub const IMPORTANCE_RTOL: f64 = 1e-6;
const MAX_MMR_TOKENS: usize = 64;
const MMR_KEY_DIM: usize = 8;
const MAX_M: usize = 16;
const MAX_SEEDS: usize = 4;
const MAX_HEADS: usize = 8;
const MAX_QUERIES: usize = 16;
const MAX_TOKENS: usize = 256;
const SCENARIO_FRAME_LIMIT: usize = 16;

pub const CHECK_IMPORTANCE: &str = "token_importance vs naive_token_importance";
pub const CHECK_CORE: &str = "select_core vs exhaustive_topk";
pub const CHECK_MMR: &str = "batched_mmr vs direct_mmr_eval";

#[derive(Debug, Clone, PartialEq)]
pub struct CheckTally {
    pub name: &'static str,
    pub passed: usize,
    pub total: usize,
    pub first_failure: Option<String>,
}

impl CheckTally {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            passed: 0,
            total: 0,
            first_failure: None,
        }
    }

    fn record(&mut self, ok: bool, describe: impl FnOnce() -> String) {
        self.total += 1;
        if ok {
            self.passed += 1;
        } else if self.first_failure.is_none() {
            self.first_failure = Some(describe());
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Mean {
    sum: f64,
    pub count: usize,
}

impl Mean {
    fn add(&mut self, x: f64) {
        self.sum += x;
        self.count += 1;
    }

    pub fn value(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

/// Equivalence tallies plus the batched-vs-classic MMR overlap, which is
/// reported but never asserted.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<CheckTally>,
    pub overlap: Mean,
    pub overlap_lambda_zero: Mean,
}

impl VerifyReport {
    fn new() -> Self {
        Self {
            checks: vec![
                CheckTally::new(CHECK_IMPORTANCE),
                CheckTally::new(CHECK_CORE),
                CheckTally::new(CHECK_MMR),
            ],
            overlap: Mean::default(),
            overlap_lambda_zero: Mean::default(),
        }
    }

    fn check(&mut self, name: &str) -> &mut CheckTally {
        self.checks.iter_mut().find(|c| c.name == name).expect("known check")
    }

    pub fn tally(&self, name: &str) -> Option<&CheckTally> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed == c.total)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let _ = writeln!(out, "{}: {}/{} passed", c.name, c.passed, c.total);
            if let Some(f) = &c.first_failure {
                let _ = writeln!(out, "  first failure: {f}");
            }
        }
        let fmt = |m: &Mean| match m.value() {
            Some(v) => format!("{v:.4} over {} instances", m.count),
            None => "n/a".into(),
        };
        let _ = writeln!(out, "batched/classic MMR overlap: {}", fmt(&self.overlap));
        let _ = writeln!(
            out,
            "batched/classic MMR overlap at lambda=0: {}",
            fmt(&self.overlap_lambda_zero)
        );
        let _ = writeln!(out, "result: {}", if self.all_passed() { "PASS" } else { "FAIL" });
        out
    }

    fn compare_importance(&mut self, attention: &AttentionTensor, label: impl Fn() -> String) {
        let fast = token_importance(attention).s_token;
        let slow = naive_token_importance(attention).s_token;
        let bad = fast.iter().zip(&slow).position(|(&a, &b)| {
            let (a, b) = (a as f64, b as f64);
            (a - b).abs() > IMPORTANCE_RTOL * a.abs().max(b.abs())
        });
        self.check(CHECK_IMPORTANCE).record(bad.is_none(), || {
            let j = bad.expect("failure has a position");
            format!("{}: token {j}: {} vs {}", label(), fast[j], slow[j])
        });
    }

    fn compare_core(&mut self, scores: &TokenScoreTable, b: usize, label: impl Fn() -> String) {
        let values: Vec<f64> = scores.s_token.iter().map(|&x| x as f64).collect();
        let fast = select_core(scores, b);
        let slow = exhaustive_topk(&values, b);
        let ok = fast == slow;
        self.check(CHECK_CORE)
            .record(ok, || format!("{}: b={b}: {fast:?} vs {slow:?}", label()));
    }

    #[allow(clippy::too_many_arguments)]
    fn compare_mmr(
        &mut self,
        candidates: &[usize],
        seeds: &[usize],
        m: usize,
        lambda: f32,
        keys: &KeyStates,
        scores: &TokenScoreTable,
        label: impl Fn() -> String,
    ) {
        let fast = batched_mmr(candidates, seeds, m, lambda, keys, scores);
        let slow = direct_mmr_eval(candidates, seeds, m, lambda, keys, scores);
        let ok = fast == slow;
        self.check(CHECK_MMR).record(ok, || {
            format!("{}: m={m} lambda={lambda}: {fast:?} vs {slow:?}", label())
        });
        if !fast.is_empty() {
            let classic = classic_sequential_mmr(candidates, seeds, m, lambda, keys, scores);
            let shared = fast.iter().filter(|x| classic.binary_search(x).is_ok()).count();
            let ratio = shared as f64 / fast.len() as f64;
            self.overlap.add(ratio);
            if lambda == 0.0 {
                self.overlap_lambda_zero.add(ratio);
            }
        }
    }
}

fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

/// Every third trial draws coarse values and repeated keys so that ties and
/// duplicate similarities are common.
fn tie_heavy(trial: usize) -> bool {
    trial.is_multiple_of(3)
}

fn random_attention(rng: &mut ChaCha8Rng, ties: bool) -> AttentionTensor {
    let h = rng.random_range(1..=MAX_HEADS);
    let nq = rng.random_range(1..=MAX_QUERIES);
    let nv = rng.random_range(1..=MAX_TOKENS);
    let data = (0..h * nq * nv)
        .map(|_| {
            if ties {
                rng.random_range(0..4u8) as f32 * 0.25
            } else {
                rng.random::<f32>()
            }
        })
        .collect();
    AttentionTensor::new(h, nq, nv, data).expect("valid random tensor")
}

fn random_keys(rng: &mut ChaCha8Rng, n: usize, ties: bool) -> KeyStates {
    let pool: Vec<Vec<f32>> = (0..3)
        .map(|_| (0..MMR_KEY_DIM).map(|_| rng.sample::<f32, _>(StandardNormal)).collect())
        .collect();
    let mut data = Vec::with_capacity(n * MMR_KEY_DIM);
    for _ in 0..n {
        if ties {
            match rng.random_range(0..5u8) {
                0 => data.extend(std::iter::repeat_n(0.0, MMR_KEY_DIM)),
                k => {
                    let scale = rng.random_range(1..=3u8) as f32;
                    data.extend(pool[(k as usize - 1) % 3].iter().map(|x| x * scale));
                }
            }
        } else {
            data.extend((0..MMR_KEY_DIM).map(|_| rng.sample::<f32, _>(StandardNormal)));
        }
    }
    KeyStates::new(Matrix::new(n, MMR_KEY_DIM, data).expect("sized")).expect("finite keys")
}

/// Runs `trials` random instances of each check from `seed`.
pub fn verify_random(trials: usize, seed: u64) -> VerifyReport {
    let mut report = VerifyReport::new();
    for trial in 0..trials {
        let mut rng = trial_rng(seed, trial);
        let ties = tie_heavy(trial);
        let label = || format!("trial {trial}");

        let attention = random_attention(&mut rng, ties);
        report.compare_importance(&attention, label);
        let scores = token_importance(&attention);
        let b = rng.random_range(0..=scores.len());
        report.compare_core(&scores, b, label);

        let nv = rng.random_range(2..=MAX_MMR_TOKENS);
        let lambda = LAMBDA_GRID[trial % LAMBDA_GRID.len()];
        let m = rng.random_range(1..=MAX_M);
        let scores = TokenScoreTable {
            s_token: (0..nv)
                .map(|_| {
                    if ties {
                        rng.random_range(0..8u8) as f32 / 8.0
                    } else {
                        rng.random()
                    }
                })
                .collect(),
        };
        let keys = random_keys(&mut rng, nv, ties);
        let mut order: Vec<usize> = (0..nv).collect();
        order.shuffle(&mut rng);
        let n_seeds = rng.random_range(0..=MAX_SEEDS.min(nv - 1));
        let (seeds, candidates) = order.split_at(n_seeds);
        let mut seeds = seeds.to_vec();
        seeds.sort_unstable();
        let mut candidates = candidates.to_vec();
        candidates.sort_unstable();
        report.compare_mmr(&candidates, &seeds, m, lambda, &keys, &scores, label);
    }
    report
}

/// Runs the checks on a loaded scenario: importance over all candidate
/// tokens, core selection at several budgets, and per-frame MMR for up to 16
/// evenly spaced frames over the lambda grid.
pub fn verify_scenario(scenario: &Scenario, seeds_per_frame: usize) -> VerifyReport {
    let mut report = VerifyReport::new();
    let label = || "scenario".to_string();
    report.compare_importance(&scenario.attention, label);
    let scores = token_importance(&scenario.attention);
    let nv = scores.len();
    for b in [0, 1, nv / 4, nv / 2, nv] {
        report.compare_core(&scores, b, label);
    }

    let n = scenario.candidate_frames();
    let t = scenario.tokens_per_frame;
    let frames = n.min(SCENARIO_FRAME_LIMIT);
    let m = (t / 4).max(1);
    for i in 0..frames {
        let f = i * n / frames;
        let frame: Vec<usize> = (f * t..(f + 1) * t).collect();
        let seeds = select_seeds(&frame, &scores, seeds_per_frame, m + seeds_per_frame);
        let rest: Vec<usize> = frame
            .iter()
            .copied()
            .filter(|c| seeds.binary_search(c).is_err())
            .collect();
        for lambda in LAMBDA_GRID {
            report.compare_mmr(&rest, &seeds, m, lambda, &scenario.keys, &scores, || {
                format!("frame {f}")
            });
        }
    }
    report
}
