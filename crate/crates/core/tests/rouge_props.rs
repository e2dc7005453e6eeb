use proptest::prelude::*;
use structsum::rouge::{lcs_length, permutation_test, rouge_l, rouge_n, rouge_text, RougeError};

/// Exhaustive LCS over all subsequences of the shorter side.
fn brute_lcs(a: &[u8], b: &[u8]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let mut best = 0;
    for mask in 0u32..(1 << short.len()) {
        let sub: Vec<u8> = (0..short.len())
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| short[i])
            .collect();
        if sub.len() > best && is_subsequence(&sub, long) {
            best = sub.len();
        }
    }
    best
}

fn is_subsequence(sub: &[u8], seq: &[u8]) -> bool {
    let mut it = seq.iter();
    sub.iter().all(|x| it.any(|y| y == x))
}

/// Clipped overlap by repeated removal from a reference multiset.
fn removal_overlap(cand: &[u8], refs: &[u8], n: usize) -> usize {
    let grams = |s: &[u8]| -> Vec<Vec<u8>> {
        if s.len() < n {
            Vec::new()
        } else {
            s.windows(n).map(<[u8]>::to_vec).collect()
        }
    };
    let mut pool = grams(refs);
    let mut hits = 0;
    for g in grams(cand) {
        if let Some(pos) = pool.iter().position(|p| *p == g) {
            pool.swap_remove(pos);
            hits += 1;
        }
    }
    hits
}

fn seq(max: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..4, 0..max)
}

proptest! {
    #[test]
    fn lcs_matches_brute_force(a in seq(11), b in seq(11)) {
        prop_assert_eq!(lcs_length(&a, &b), brute_lcs(&a, &b));
        prop_assert_eq!(lcs_length(&a, &b), lcs_length(&b, &a));
    }

    #[test]
    fn rouge_n_matches_removal_count(c in seq(15), r in prop::collection::vec(0u8..4, 2..15), n in 1usize..=2) {
        let s = rouge_n(&c, &r, n).unwrap();
        let overlap = removal_overlap(&c, &r, n) as f64;
        let cn = c.len().saturating_sub(n - 1) as f64;
        let rn = (r.len() - (n - 1)) as f64;
        let p = if cn > 0.0 { overlap / cn } else { 0.0 };
        prop_assert!((s.p - p).abs() < 1e-12);
        prop_assert!((s.r - overlap / rn).abs() < 1e-12);
    }

    #[test]
    fn scores_are_bounded(c in seq(15), r in prop::collection::vec(0u8..4, 1..15)) {
        let l = rouge_l(&c, &r).unwrap();
        for s in [rouge_n(&c, &r, 1).unwrap(), rouge_n(&c, &r, 2).unwrap(), l] {
            for v in s.as_array() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            if s.p == 0.0 || s.r == 0.0 {
                prop_assert_eq!(s.f, 0.0);
            } else {
                let f = 2.0 * s.p * s.r / (s.p + s.r);
                prop_assert!((s.f - f).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_sequences_score_one(r in prop::collection::vec(0u8..4, 1..15)) {
        let l = rouge_l(&r, &r).unwrap();
        prop_assert_eq!(l.as_array(), [1.0, 1.0, 1.0]);
        prop_assert_eq!(rouge_n(&r, &r, 1).unwrap().f, 1.0);
    }

    #[test]
    fn permutation_is_deterministic_and_a_probability(
        a in prop::collection::vec(0.0f64..1.0, 2..12),
        shift in -0.5f64..0.5,
        seed in 0u64..1000,
    ) {
        let b: Vec<f64> = a.iter().enumerate().map(|(i, x)| x + shift * (i % 3) as f64).collect();
        let p1 = permutation_test(&a, &b, 200, seed).unwrap();
        let p2 = permutation_test(&a, &b, 200, seed).unwrap();
        prop_assert_eq!(p1, p2);
        prop_assert!(p1 > 0.0 && p1 <= 1.0);
        // the statistic is symmetric in the two systems
        prop_assert_eq!(p1, permutation_test(&b, &a, 200, seed).unwrap());
    }
}

#[test]
fn worked_rouge_examples() {
    let t = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
    let s = rouge_n(&t("the cat sat"), &t("the cat sat down"), 1).unwrap();
    assert!((s.p - 1.0).abs() < 1e-12 && (s.r - 0.75).abs() < 1e-12);
    assert!((s.f - 6.0 / 7.0).abs() < 1e-12);
    let s = rouge_n(&t("the the the"), &t("the cat"), 1).unwrap();
    assert!((s.p - 1.0 / 3.0).abs() < 1e-12 && (s.r - 0.5).abs() < 1e-12);
    assert_eq!(lcs_length(&t("a b c d"), &t("a c b d")), 3);
    let s = rouge_l(&t("police killed the gunman"), &t("police kill the gunman")).unwrap();
    assert!((s.f - 0.75).abs() < 1e-12);
}

#[test]
fn empty_inputs() {
    let e: Vec<u8> = Vec::new();
    assert_eq!(rouge_n(&[1u8], &e, 1), Err(RougeError::EmptyReference));
    assert_eq!(rouge_l(&[1u8], &e), Err(RougeError::EmptyReference));
    assert_eq!(rouge_n(&e, &[1u8], 1).unwrap().as_array(), [0.0; 3]);
    assert_eq!(rouge_n(&[1u8], &[1u8], 3), Err(RougeError::BadOrder));
    // a one-token reference has no bigrams
    assert_eq!(rouge_n(&[1u8], &[1u8], 2).unwrap().f, 0.0);
}

#[test]
fn text_scoring_uses_the_corpus_tokenizer() {
    let s = rouge_text("Amanda'll bring cakes.", "amanda ' ll bring cakes .").unwrap();
    assert_eq!(s.r1.f, 1.0);
    assert_eq!(s.rl.f, 1.0);
}

#[test]
fn permutation_examples() {
    let a = [0.5, 0.6, 0.7, 0.8];
    assert_eq!(permutation_test(&a, &a, 1000, 1).unwrap(), 1.0);
    let b: Vec<f64> = a.iter().map(|x| x - 0.3).collect();
    // all four differences are equal: 2 of 16 sign patterns reach the observed mean
    let p = permutation_test(&a, &b, 5000, 3).unwrap();
    assert!((p - 0.125).abs() < 0.02, "{p}");
    assert_eq!(
        permutation_test(&a, &b[..3], 1000, 1),
        Err(RougeError::LengthMismatch(4, 3))
    );
    assert_eq!(
        permutation_test(&a[..1], &b[..1], 1000, 1),
        Err(RougeError::TooFewScores)
    );
    assert_eq!(permutation_test(&a, &b, 99, 1), Err(RougeError::TooFewIterations));
}
