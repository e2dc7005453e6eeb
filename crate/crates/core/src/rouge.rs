//! ROUGE-1/2/L with F, P and R, and a paired permutation test.
//!
//! ROUGE-L is sentence-level: the whole summary is one sequence.

use std::collections::HashMap;
use std::hash::Hash;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RougeError {
    #[error("reference is empty")]
    EmptyReference,
    #[error("score lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 paired scores")]
    TooFewScores,
    #[error("need at least 100 permutation iterations")]
    TooFewIterations,
    #[error("n must be 1 or 2")]
    BadOrder,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct RougeScore {
    pub f: f64,
    pub p: f64,
    pub r: f64,
}

impl RougeScore {
    pub fn from_counts(overlap: usize, candidate: usize, reference: usize) -> Self {
        let p = if candidate == 0 {
            0.0
        } else {
            overlap as f64 / candidate as f64
        };
        let r = if reference == 0 {
            0.0
        } else {
            overlap as f64 / reference as f64
        };
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        Self { f, p, r }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.f, self.p, self.r]
    }

    pub fn mean(scores: &[RougeScore]) -> RougeScore {
        let n = scores.len().max(1) as f64;
        let sum = |g: fn(&RougeScore) -> f64| scores.iter().map(g).sum::<f64>() / n;
        RougeScore {
            f: sum(|s| s.f),
            p: sum(|s| s.p),
            r: sum(|s| s.r),
        }
    }
}

fn ngram_counts<T: Eq + Hash>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram overlap for `n` in {1, 2}.
pub fn rouge_n<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> Result<RougeScore, RougeError> {
    if !(1..=2).contains(&n) {
        return Err(RougeError::BadOrder);
    }
    if reference.is_empty() {
        return Err(RougeError::EmptyReference);
    }
    let cand = ngram_counts(candidate, n);
    let refc = ngram_counts(reference, n);
    let overlap = cand
        .iter()
        .map(|(g, c)| (*c).min(refc.get(g).copied().unwrap_or(0)))
        .sum();
    Ok(RougeScore::from_counts(
        overlap,
        candidate.len().saturating_sub(n - 1),
        reference.len().saturating_sub(n - 1),
    ))
}

pub fn lcs_length<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> Result<RougeScore, RougeError> {
    if reference.is_empty() {
        return Err(RougeError::EmptyReference);
    }
    Ok(RougeScore::from_counts(
        lcs_length(candidate, reference),
        candidate.len(),
        reference.len(),
    ))
}

/// ROUGE-1, ROUGE-2 and ROUGE-L of one pair.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RougeTriple {
    pub r1: RougeScore,
    pub r2: RougeScore,
    pub rl: RougeScore,
}

pub fn rouge_all<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> Result<RougeTriple, RougeError> {
    Ok(RougeTriple {
        r1: rouge_n(candidate, reference, 1)?,
        r2: rouge_n(candidate, reference, 2)?,
        rl: rouge_l(candidate, reference)?,
    })
}

/// Scores text with the corpus tokenizer.
pub fn rouge_text(candidate: &str, reference: &str) -> Result<RougeTriple, RougeError> {
    let c = crate::corpus::split_tokens(candidate);
    let r = crate::corpus::split_tokens(reference);
    rouge_all(&c, &r)
}

impl RougeTriple {
    pub fn mean(scores: &[RougeTriple]) -> RougeTriple {
        let pick = |g: fn(&RougeTriple) -> RougeScore| RougeScore::mean(&scores.iter().map(g).collect::<Vec<_>>());
        RougeTriple {
            r1: pick(|s| s.r1),
            r2: pick(|s| s.r2),
            rl: pick(|s| s.rl),
        }
    }

    /// `{"id", "r1": [f,p,r], "r2": [...], "rl": [...]}`
    pub fn record(&self, id: &str) -> serde_json::Value {
        serde_json::json!({
            "id": id,
            "r1": self.r1.as_array(),
            "r2": self.r2.as_array(),
            "rl": self.rl.as_array(),
        })
    }
}

/// Id of the corpus-mean footer record in evaluation output.
pub const MEAN_RECORD_ID: &str = "__mean__";

/// Two-sided paired sign-flip test on the mean difference. Returns
/// `(1 + #{|perm diff| >= |observed diff|}) / (1 + iterations)`, except that a
/// zero observed difference gives exactly 1.
pub fn permutation_test(a: &[f64], b: &[f64], iterations: usize, seed: u64) -> Result<f64, RougeError> {
    if a.len() != b.len() {
        return Err(RougeError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(RougeError::TooFewScores);
    }
    if iterations < 100 {
        return Err(RougeError::TooFewIterations);
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = diffs.len() as f64;
    let observed = (diffs.iter().sum::<f64>() / n).abs();
    if observed == 0.0 {
        return Ok(1.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // guards against float noise in sums that are equal in exact arithmetic
    let tol = 1e-12 * observed.max(1.0);
    let mut hits = 0usize;
    for _ in 0..iterations {
        let s: f64 = diffs.iter().map(|d| if rng.random::<bool>() { *d } else { -*d }).sum();
        if (s / n).abs() >= observed - tol {
            hits += 1;
        }
    }
    Ok((hits + 1) as f64 / (iterations + 1) as f64)
}
